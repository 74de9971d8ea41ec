"""Position (non-local) attention, channel attention, and feature fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class Conv1x1:
    kernel: Tensor
    bias: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int) -> Conv1x1:
        k = L.glorot_uniform(rng, (1, 1, channels, channels), channels, channels)
        return cls(Tensor(k, requires_grad=True), Tensor(np.zeros(channels), requires_grad=True))

    @classmethod
    def identity(cls, channels: int) -> Conv1x1:
        return cls(Tensor(np.eye(channels).reshape(1, 1, channels, channels)), Tensor(np.zeros(channels)))

    def __call__(self, x: Tensor) -> Tensor:
        return L.conv2d(x, self.kernel, self.bias)


@dataclass
class PositionAttentionParams:
    conv_k: Conv1x1
    conv_q: Conv1x1
    conv_v: Conv1x1
    conv_a: Conv1x1
    bn: L.BatchNormState

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int) -> PositionAttentionParams:
        return cls(
            conv_k=Conv1x1.create(rng, channels),
            conv_q=Conv1x1.create(rng, channels),
            conv_v=Conv1x1.create(rng, channels),
            conv_a=Conv1x1.create(rng, channels),
            bn=L.BatchNormState.create(channels),
        )


@dataclass
class PositionAttentionTrace:
    """Intermediates of one position-attention evaluation."""

    keys: Tensor
    queries: Tensor
    values: Tensor
    relations: Tensor
    attention: Tensor
    output: Tensor


def position_attention(
    fmap: Tensor,
    params: PositionAttentionParams,
    mode: str = "train",
    use_bn: bool = True,
    update_stats: bool = True,
) -> PositionAttentionTrace:
    """Non-local mixing of features across all spatial positions.

    For each image, keys ``K`` (``hw x c``) come from a 1x1 conv; queries and
    values come from their own 1x1 convs followed by max pooling pairs of
    consecutive positions (``hw // 2`` rows; a trailing odd row is dropped).
    ``R = softmax_rows(K Q^T)`` and ``R V`` is reshaped back to the map,
    passed through a final 1x1 conv, then batch norm.
    """
    if fmap.ndim != 4:
        raise DimensionError(f"expected (n, h, w, c) map, got {fmap.shape}")
    n, h, w, c = fmap.shape
    if h * w < 2:
        raise DimensionError(f"position attention needs at least 2 positions, got {h}x{w}")
    keys = T.reshape(params.conv_k(fmap), (n, h * w, c))
    queries = L.maxpool_rows(T.reshape(params.conv_q(fmap), (n, h * w, c)), 2, 2)
    values = L.maxpool_rows(T.reshape(params.conv_v(fmap), (n, h * w, c)), 2, 2)
    relations = T.softmax(T.matmul(keys, T.transpose(queries, (0, 2, 1))), axis=-1)
    attention = T.matmul(relations, values)
    out = params.conv_a(T.reshape(attention, (n, h, w, c)))
    if use_bn:
        out = L.batchnorm(out, params.bn, mode, update=update_stats)
    return PositionAttentionTrace(keys, queries, values, relations, attention, out)


@dataclass
class ChannelAttentionParams:
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor
    ratio: int

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int, ratio: int = 4) -> ChannelAttentionParams:
        if ratio < 1:
            raise ContractError("channel reduction ratio must be >= 1")
        hidden = math.ceil(channels / ratio)
        return cls(
            Tensor(L.glorot_uniform(rng, (channels, hidden), channels, hidden), requires_grad=True),
            Tensor(np.zeros(hidden), requires_grad=True),
            Tensor(L.glorot_uniform(rng, (hidden, channels), hidden, channels), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
            ratio,
        )


def channel_gate(fmap: Tensor, params: ChannelAttentionParams) -> Tensor:
    """Per-image channel weights in (0, 1): ``sigmoid(fc2(relu(fc1(gap))))``."""
    s = L.gap(fmap)
    hidden = T.relu(L.dense(s, params.fc1_weight, params.fc1_bias))
    return T.sigmoid(L.dense(hidden, params.fc2_weight, params.fc2_bias))


def channel_attention(fmap: Tensor, params: ChannelAttentionParams) -> Tensor:
    """Rescale each channel of ``fmap`` by its learned gate."""
    if fmap.ndim != 4:
        raise DimensionError(f"expected (n, h, w, c) map, got {fmap.shape}")
    n, _, _, c = fmap.shape
    if params.fc2_weight.shape[1] != c:
        raise DimensionError(f"gate produces {params.fc2_weight.shape[1]} weights for {c} channels")
    g = channel_gate(fmap, params)
    return T.mul(fmap, T.reshape(g, (n, 1, 1, c)))


def fuse_maps(maps: list[Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Concatenate maps channel-wise into ``M`` and build the head input.

    Returns ``(M, gap(M), concat(gap(M), flatten(M)))``.
    """
    if not maps:
        raise DimensionError("fuse needs at least one map")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise DimensionError(f"fused maps disagree in shape: {[m.shape for m in maps]}")
    merged = T.concat(maps, axis=-1) if len(maps) > 1 else maps[0]
    pooled = L.gap(merged)
    return merged, pooled, T.concat([pooled, L.flatten(merged)], axis=1)


def fuse(fmap: Tensor, amap: Tensor, cmap: Tensor) -> Tensor:
    """Head input vector from the backbone, position, and channel maps."""
    return fuse_maps([fmap, amap, cmap])[2]
