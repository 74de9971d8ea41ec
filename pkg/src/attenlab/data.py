"""Labeled image datasets: directory ingestion and export."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .model import CLASS_NAMES
from .raster import read_image, write_png

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
BENIGN = (0, 1, 2)
MALIGNANT = 3


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int
    id: str
    mask: np.ndarray | None = None

    def __post_init__(self):
        if not 0 <= self.label < len(CLASS_NAMES):
            raise InputError(f"{self.id}: label {self.label} outside 0..{len(CLASS_NAMES) - 1}")
        if self.mask is not None and self.mask.shape != self.pixels.shape[:2]:
            raise InputError(f"{self.id}: mask shape {self.mask.shape} != image {self.pixels.shape[:2]}")


@dataclass
class LoadReport:
    counts: dict[str, int] = field(default_factory=dict)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


@dataclass
class Dataset:
    images: list[LabeledImage]
    class_names: tuple[str, ...] = CLASS_NAMES
    provenance: dict = field(default_factory=dict)
    report: LoadReport | None = None

    def __post_init__(self):
        if not self.images:
            raise InputError("a dataset needs at least one image")
        ids = [im.id for im in self.images]
        if len(set(ids)) != len(ids):
            raise InputError("image ids must be unique")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i) -> LabeledImage:
        return self.images[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([im.label for im in self.images], dtype=np.int64)

    @property
    def pixels(self) -> list[np.ndarray]:
        return [im.pixels for im in self.images]

    def counts(self) -> dict[str, int]:
        lab = self.labels
        return {name: int(np.sum(lab == i)) for i, name in enumerate(self.class_names)}

    def subset(self, indices) -> Dataset:
        return Dataset([self.images[i] for i in indices], self.class_names, dict(self.provenance))


def load_dataset(root) -> Dataset:
    """Load ``<root>/{NE,EP,EH,EA}/*.{png,jpg,jpeg}``.

    Files are ordered by relative path. Undecodable files are skipped with a
    warning; ``<root>/masks/<stem>.png`` is attached as a mask when present.
    """
    root = Path(root)
    missing = [c for c in CLASS_NAMES if not (root / c).is_dir()]
    if missing:
        raise ConfigError(f"dataset root {root} lacks class directories {missing}")
    report = LoadReport()
    found = []
    for label, name in enumerate(CLASS_NAMES):
        files = [p for p in (root / name).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
        found.extend((p.relative_to(root).as_posix(), p, label) for p in files)
    found.sort(key=lambda item: item[0])
    images = []
    for rel, path, label in found:
        try:
            pixels = read_image(path)
        except (FormatError, OSError) as exc:
            msg = f"skipping {rel}: {exc}"
            report.skipped.append((rel, str(exc)))
            report.warnings.append(msg)
            warnings.warn(msg, stacklevel=2)
            continue
        mask = None
        mpath = root / "masks" / (path.stem + ".png")
        if mpath.is_file():
            mask = read_image(mpath)[:, :, 0] > 127
            if mask.shape != pixels.shape[:2]:
                mask = None
        images.append(LabeledImage(pixels, label, rel.rsplit(".", 1)[0], mask))
    for label, name in enumerate(CLASS_NAMES):
        report.counts[name] = sum(1 for im in images if im.label == label)
        if report.counts[name] == 0:
            msg = f"class {name} has no images"
            report.warnings.append(msg)
            warnings.warn(msg, stacklevel=2)
    if not images:
        raise InputError(f"no decodable images under {root}")
    return Dataset(images, CLASS_NAMES, {"source": "directory", "root": str(root)}, report)


def export_dataset(ds: Dataset, root) -> None:
    """Write images as PNG in the class-directory layout, masks under ``masks/``."""
    root = Path(root)
    for name in ds.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    if any(im.mask is not None for im in ds.images):
        (root / "masks").mkdir(parents=True, exist_ok=True)
    for im in ds.images:
        stem = im.id.rsplit("/", 1)[-1]
        write_png(root / ds.class_names[im.label] / f"{stem}.png", im.pixels)
        if im.mask is not None:
            write_png(root / "masks" / f"{stem}.png", (im.mask.astype(np.uint8) * 255))
