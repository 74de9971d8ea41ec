"""Procedural four-class "gland" images with ground-truth motif masks.

Every image is a speckled pink-noise field with one motif cluster drawn in a
purple stain colour. Classes differ only in motif geometry:

* 0 (NE): a few small thin rings, well separated
* 1 (EP): one thick-walled ring around a smaller concentric ring
* 2 (EH): many small rings packed into a crowded cluster
* 3 (EA): elongated ellipses lying back to back, touching

Per-image stain colour, contrast, and ink amount are randomised so that
global colour statistics carry little class information.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset, LabeledImage
from .errors import ContractError
from .model import CLASS_NAMES

BACKGROUND = np.array([232.0, 176.0, 204.0])
STAIN = np.array([118.0, 62.0, 150.0])


def pink_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    """Zero-mean, unit-std noise with a 1/f amplitude spectrum."""
    white = rng.normal(size=(size, size))
    f = np.fft.fftfreq(size)
    radius = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    radius[0, 0] = 1.0
    spec = np.fft.fft2(white) / radius
    spec[0, 0] = 0.0
    noise = np.real(np.fft.ifft2(spec))
    return (noise - noise.mean()) / (noise.std() + 1e-12)


class _Canvas:
    def __init__(self, size: int):
        self.size = size
        yy, xx = np.mgrid[0:size, 0:size]
        self.y = yy + 0.5
        self.x = xx + 0.5
        self.ink = np.zeros((size, size))
        self.mask = np.zeros((size, size), dtype=bool)

    def ring(self, cy, cx, r, thickness):
        d = np.hypot(self.y - cy, self.x - cx)
        self.ink = np.maximum(self.ink, np.clip(thickness / 2 + 0.5 - np.abs(d - r), 0, 1))
        self.mask |= d <= r + thickness / 2

    def ellipse(self, cy, cx, a, b, angle, thickness):
        dy, dx = self.y - cy, self.x - cx
        ca, sa = np.cos(angle), np.sin(angle)
        u = dx * ca + dy * sa
        v = -dx * sa + dy * ca
        q = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        grad = np.sqrt((u / a**2) ** 2 + (v / b**2) ** 2) / np.maximum(q, 1e-9)
        dist = (q - 1.0) / np.maximum(grad, 1e-9)
        self.ink = np.maximum(self.ink, np.clip(thickness / 2 + 0.5 - np.abs(dist), 0, 1))
        self.mask |= dist <= thickness / 2


def _hex_cluster(rng, count: int, spacing: float) -> list[tuple[float, float]]:
    """The ``count`` hexagonal-lattice points nearest a jittered origin."""
    pts = []
    for i in range(-4, 5):
        for j in range(-4, 5):
            pts.append((spacing * (i + 0.5 * j), spacing * (np.sqrt(3) / 2) * j))
    shift = rng.uniform(-spacing / 2, spacing / 2, size=2)
    pts.sort(key=lambda p: np.hypot(p[0] - shift[0], p[1] - shift[1]))
    chosen = np.array(pts[:count]) - shift
    chosen -= chosen.mean(axis=0)
    return [(float(a), float(b)) for a, b in chosen + rng.normal(0, 0.3, size=chosen.shape)]


def _draw_motif(canvas: _Canvas, label: int, rng: np.random.Generator, cy: float, cx: float) -> None:
    if label == 0:
        r = rng.uniform(4.0, 5.0)
        count = int(rng.integers(3, 5))
        spread = rng.uniform(9.0, 11.0)
        phase = rng.uniform(0, 2 * np.pi)
        for i in range(count):
            ang = phase + 2 * np.pi * i / count + rng.normal(0, 0.15)
            canvas.ring(cy + spread * np.sin(ang), cx + spread * np.cos(ang), r, rng.uniform(1.6, 2.2))
    elif label == 1:
        r = rng.uniform(9.0, 11.0)
        canvas.ring(cy, cx, r, rng.uniform(3.0, 3.8))
        canvas.ring(cy, cx, r * rng.uniform(0.4, 0.5), rng.uniform(1.6, 2.2))
    elif label == 2:
        r = rng.uniform(3.0, 3.6)
        t = rng.uniform(1.3, 1.7)
        for py, px in _hex_cluster(rng, int(rng.integers(7, 10)), 2 * r + t - 0.4):
            canvas.ring(cy + py, cx + px, r, t)
    elif label == 3:
        a = rng.uniform(8.0, 10.0)
        b = rng.uniform(3.5, 4.5)
        t = rng.uniform(1.6, 2.2)
        angle = rng.uniform(0, np.pi)
        count = int(rng.integers(2, 4))
        # neighbours share walls along the minor axis
        step = 2 * b + t * 0.5
        nx, ny = -np.sin(angle), np.cos(angle)
        for i in range(count):
            off = (i - (count - 1) / 2) * step
            canvas.ellipse(cy + off * ny, cx + off * nx, a, b, angle, t)
    else:
        raise ContractError(f"unknown class {label}")


def synth_image(label: int, rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """One ``(size, size, 3)`` uint8 image and its boolean motif mask."""
    canvas = _Canvas(size)
    margin = 15 * size / 64
    cy, cx = rng.uniform(margin, size - margin, size=2)
    _draw_motif(canvas, label, rng, cy, cx)

    tint = BACKGROUND + rng.normal(0, 10, size=3)
    stain = STAIN + rng.normal(0, 12, size=3)
    noise_amp = rng.uniform(8, 20)
    contrast = rng.uniform(0.55, 0.95)
    bg = tint[None, None, :] + noise_amp * pink_noise(rng, size)[:, :, None]
    speckle = rng.random((size, size)) < rng.uniform(0.01, 0.04)
    bg = np.where(speckle[:, :, None], bg - rng.uniform(20, 50), bg)
    alpha = contrast * canvas.ink[:, :, None]
    img = bg * (1 - alpha) + stain[None, None, :] * alpha
    img += rng.normal(0, 4, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), canvas.mask


def synth_generate(n_per_class: int, size: int = 64, seed: int = 7) -> Dataset:
    """``4 * n_per_class`` images, class-major order, fully determined by the seed."""
    if n_per_class < 1:
        raise ContractError("n_per_class must be >= 1")
    images = []
    for label, name in enumerate(CLASS_NAMES):
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, label, i])
            pixels, mask = synth_image(label, rng, size)
            images.append(LabeledImage(pixels, label, f"{name}_{i:04d}", mask))
    return Dataset(images, CLASS_NAMES, {"source": "synthetic", "seed": seed, "size": size})
