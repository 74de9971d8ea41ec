"""Class activation maps and guided backpropagation heatmaps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, NumericError
from .model import Model, forward
from .raster import write_png
from .tensor import Tensor
from .training import preprocess, resize_bilinear

# Overlay colour ramp: piecewise linear through blue, cyan, yellow, red.
RAMP_STOPS = np.array([0.0, 1 / 3, 2 / 3, 1.0])
RAMP_COLORS = np.array([[0, 0, 255], [0, 255, 255], [255, 255, 0], [255, 0, 0]], dtype=np.float64)
OVERLAY_ALPHA = 0.5


@dataclass
class Heatmap:
    values: np.ndarray
    source: str
    target: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def normalize(m: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NumericError("heatmap contains non-finite values")
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def _check_class(model: Model, c: int) -> None:
    if not 0 <= c < model.config.num_classes:
        raise ContractError(f"class {c} outside 0..{model.config.num_classes - 1}")


def _model_input(model: Model, image: np.ndarray) -> np.ndarray:
    return preprocess(image, model.config.input_size)[None]


def cam_from_maps(merged: np.ndarray, weights: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Weighted channel sum, relu, normalise, bilinear upsample, normalise."""
    raw = np.maximum(merged @ weights, 0.0)
    small = normalize(raw)
    return normalize(resize_bilinear(small, out_h, out_w))


def cam(model: Model, image: np.ndarray, c: int) -> Heatmap:
    """Class activation map over the fused (backbone + attention) features.

    Channel weights are the gradient of the class-``c`` logit with respect
    to the globally pooled fused map, which reduces to the classic CAM
    weights when the head is a single linear layer on the pooled vector.
    """
    _check_class(model, c)
    x = _model_input(model, image)
    out = forward(model, x, "infer", update_stats=False)
    try:
        T.backward(out.logits[0, c])
        weights = np.zeros(out.pooled.shape[1]) if out.pooled.grad is None else out.pooled.grad[0]
    finally:
        model.zero_grad()
    values = cam_from_maps(out.merged.data[0], weights, image.shape[0], image.shape[1])
    return Heatmap(values, "cam", c)


def input_gradient(fn: Callable[[Tensor], Tensor], x: np.ndarray, guided: bool = True, record: list | None = None) -> np.ndarray:
    """Gradient of scalar ``fn(x)`` w.r.t. ``x``, optionally with guided relus."""
    xt = Tensor(x, requires_grad=True)
    y = fn(xt)
    if not y.requires_grad:
        return np.zeros_like(xt.data)
    if guided:
        with T.guided_relu(record):
            T.backward(y)
    else:
        T.backward(y)
    return np.zeros_like(xt.data) if xt.grad is None else xt.grad


def saliency_from_gradient(grad: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Collapse ``(h, w, 3)`` gradients by channel-wise max magnitude."""
    m = np.abs(grad).max(axis=-1)
    if m.shape != (out_h, out_w):
        m = resize_bilinear(m, out_h, out_w)
    return normalize(m)


def guided_backprop(model: Model, image: np.ndarray, c: int, record: list | None = None) -> Heatmap:
    """Guided-backpropagation saliency of the class-``c`` logit."""
    _check_class(model, c)
    x = _model_input(model, image)
    try:
        grad = input_gradient(lambda t: forward(model, t, "infer", update_stats=False).logits[0, c], x, True, record)
    finally:
        model.zero_grad()
    values = saliency_from_gradient(grad[0], image.shape[0], image.shape[1])
    return Heatmap(values, "gb", c)


def ramp(values: np.ndarray) -> np.ndarray:
    v = np.clip(values, 0.0, 1.0)
    return np.stack([np.interp(v, RAMP_STOPS, RAMP_COLORS[:, ch]) for ch in range(3)], axis=-1)


def render(heatmap: Heatmap | np.ndarray, base_image: np.ndarray | None = None, mode: str = "gray") -> np.ndarray:
    """8-bit gray map, or ``base * 0.5 + ramp(heatmap) * 0.5`` as RGB."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    if mode == "gray":
        return np.rint(np.clip(values, 0, 1) * 255).astype(np.uint8)
    if mode != "overlay":
        raise ContractError(f"unknown render mode {mode!r}")
    if base_image is None:
        raise ContractError("overlay mode needs a base image")
    base = np.asarray(base_image, dtype=np.float64)
    if base.ndim == 2:
        base = np.repeat(base[:, :, None], 3, axis=2)
    if base.shape[:2] != values.shape:
        raise DimensionError(f"heatmap {values.shape} does not match base image {base.shape[:2]}")
    out = (1 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * ramp(values)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def heatmap_filename(stem: str, heatmap: Heatmap, class_names) -> str:
    return f"{stem}.{heatmap.source}.{class_names[heatmap.target]}.png"


def save_heatmap(heatmap: Heatmap, base_image: np.ndarray, out_dir, stem: str, class_names, mode: str = "gray") -> Path:
    path = Path(out_dir) / heatmap_filename(stem, heatmap, class_names)
    write_png(path, render(heatmap, base_image, mode))
    return path
