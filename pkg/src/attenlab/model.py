"""HIENet assembly: VGG-style backbone, attention blocks, three-layer head.

Checkpoint layout::

    b"HIEN1\\n"
    <one line of UTF-8 JSON: config, config_hash, tensors[{name, shape, offset}], blob_bytes>
    <little-endian float32 blob; offsets are relative to its first byte>
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import layers as L
from . import tensor as T
from .attention import (
    ChannelAttentionParams,
    PositionAttentionParams,
    channel_attention,
    fuse_maps,
    position_attention,
)
from .errors import ConfigError, DimensionError, FormatError
from .tensor import Tensor

MAGIC = b"HIEN"
VERSION = b"1"
CLASS_NAMES = ("NE", "EP", "EH", "EA")


@dataclass(frozen=True)
class StageSpec:
    convs: int
    width: int
    pool: bool = True


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    stages: tuple[StageSpec, ...] = (StageSpec(1, 16), StageSpec(1, 32), StageSpec(1, 64))
    use_position_attention: bool = True
    use_channel_attention: bool = True
    head_widths: tuple[int, int, int] = (256, 64, 4)
    num_classes: int = 4
    channel_ratio: int = 4
    seed: int = 7

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        if len(self.head_widths) != 3 or self.head_widths[-1] != self.num_classes:
            raise ConfigError(
                f"head must be three FC layers ending in {self.num_classes} units, got {self.head_widths}"
            )
        if any(w < 1 for w in self.head_widths):
            raise ConfigError("head widths must be positive")
        if self.channel_ratio < 1:
            raise ConfigError("channel ratio must be >= 1")
        if self.input_size < 1:
            raise ConfigError("input size must be positive")
        for s in self.stages:
            if s.convs < 1 or s.width < 1:
                raise ConfigError(f"invalid stage {s}")
        side = self.feature_side
        if side < 1:
            raise ConfigError(f"input size {self.input_size} is pooled away by {len(self.stages)} stages")
        if self.use_position_attention and side * side < 2:
            raise ConfigError("position attention needs a feature map with at least 2 positions")

    @property
    def feature_side(self) -> int:
        side = self.input_size
        for s in self.stages:
            if s.pool:
                side //= 2
        return side

    @property
    def feature_channels(self) -> int:
        return self.stages[-1].width

    @property
    def fused_maps(self) -> int:
        return 1 + int(self.use_position_attention) + int(self.use_channel_attention)

    @property
    def head_input_size(self) -> int:
        c = self.feature_channels * self.fused_maps
        return c * (1 + self.feature_side**2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        try:
            d = dict(d)
            d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
            d["head_widths"] = tuple(d["head_widths"])
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad model config: {exc}") from None

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


PRESETS = {
    "hienet-mini": ModelConfig(),
    "hienet-full": ModelConfig(
        input_size=224,
        stages=(
            StageSpec(2, 64),
            StageSpec(2, 128),
            StageSpec(3, 256),
            StageSpec(3, 512),
            StageSpec(3, 512),
        ),
        head_widths=(4096, 1024, 4),
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]
    if overrides:
        if "num_classes" in overrides and "head_widths" not in overrides:
            overrides["head_widths"] = cfg.head_widths[:2] + (overrides["num_classes"],)
        cfg = replace(cfg, **overrides)
    return cfg


@dataclass
class ConvBlock:
    kernel: Tensor
    bn: L.BatchNormState


@dataclass
class ForwardOutput:
    """Class probabilities plus the maps needed for interpretation."""

    probs: Tensor
    logits: Tensor
    features: Tensor
    position: Tensor | None
    channel: Tensor | None
    merged: Tensor
    pooled: Tensor
    head_input: Tensor


@dataclass
class Model:
    config: ModelConfig
    backbone: list[list[ConvBlock]]
    position: PositionAttentionParams | None
    channel: ChannelAttentionParams | None
    head: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    head_bn: list[L.BatchNormState] = field(default_factory=list)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Trainable tensors in a fixed order."""
        for name, value in self._named_state():
            if isinstance(value, Tensor):
                yield name, value

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def _named_state(self) -> Iterator[tuple[str, Tensor | tuple[L.BatchNormState, str]]]:
        def bn_entries(prefix: str, bn: L.BatchNormState):
            yield f"{prefix}.gamma", bn.gamma
            yield f"{prefix}.beta", bn.beta
            yield f"{prefix}.running_mean", (bn, "running_mean")
            yield f"{prefix}.running_var", (bn, "running_var")

        for si, stage in enumerate(self.backbone):
            for ci, block in enumerate(stage):
                yield f"backbone.{si}.{ci}.kernel", block.kernel
                yield from bn_entries(f"backbone.{si}.{ci}.bn", block.bn)
        if self.position is not None:
            for conv in ("conv_k", "conv_q", "conv_v", "conv_a"):
                c = getattr(self.position, conv)
                yield f"position.{conv}.kernel", c.kernel
                yield f"position.{conv}.bias", c.bias
            yield from bn_entries("position.bn", self.position.bn)
        if self.channel is not None:
            yield "channel.fc1.weight", self.channel.fc1_weight
            yield "channel.fc1.bias", self.channel.fc1_bias
            yield "channel.fc2.weight", self.channel.fc2_weight
            yield "channel.fc2.bias", self.channel.fc2_bias
        for i, (w, b) in enumerate(self.head):
            yield f"head.{i}.weight", w
            yield f"head.{i}.bias", b
            if i < len(self.head_bn):
                yield from bn_entries(f"head.{i}.bn", self.head_bn[i])

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every persisted array (parameters and running statistics) in order."""
        out = []
        for name, value in self._named_state():
            if isinstance(value, Tensor):
                out.append((name, value.data))
            else:
                bn, attr = value
                out.append((name, getattr(bn, attr)))
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, value in self._named_state():
            if name not in arrays:
                raise FormatError(f"missing tensor {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if isinstance(value, Tensor):
                if arr.shape != value.shape:
                    raise FormatError(f"tensor {name!r}: shape {arr.shape}, expected {value.shape}")
                value.data = arr.copy()
                value.grad = None
            else:
                bn, attr = value
                if arr.shape != getattr(bn, attr).shape:
                    raise FormatError(f"tensor {name!r}: shape {arr.shape}, expected {getattr(bn, attr).shape}")
                setattr(bn, attr, arr.copy())

    def quantized(self) -> Model:
        """A copy whose stored arrays are rounded to float32 precision."""
        twin = copy.deepcopy(self)
        twin.load_state({n: a.astype(np.float32) for n, a in self.state_arrays()})
        return twin


def build(config: ModelConfig) -> Model:
    """Initialise a model deterministically from ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    backbone = []
    cin = 3
    for stage in config.stages:
        blocks = []
        for _ in range(stage.convs):
            k = L.he_normal(rng, (3, 3, cin, stage.width), 9 * cin)
            blocks.append(ConvBlock(Tensor(k, requires_grad=True), L.BatchNormState.create(stage.width)))
            cin = stage.width
        backbone.append(blocks)
    c = config.feature_channels
    position = PositionAttentionParams.create(rng, c) if config.use_position_attention else None
    channel = ChannelAttentionParams.create(rng, c, config.channel_ratio) if config.use_channel_attention else None
    head = []
    head_bn = []
    fan_in = config.head_input_size
    for i, width in enumerate(config.head_widths):
        w = L.he_normal(rng, (fan_in, width), fan_in)
        head.append((Tensor(w, requires_grad=True), Tensor(np.zeros(width), requires_grad=True)))
        if i < len(config.head_widths) - 1:
            head_bn.append(L.BatchNormState.create(width))
        fan_in = width
    return Model(config, backbone, position, channel, head, head_bn)


def forward(model: Model, batch, mode: str = "infer", update_stats: bool | None = None) -> ForwardOutput:
    """Run ``(n, s, s, 3)`` preprocessed images through the network.

    ``train`` mode normalises with batch statistics and updates running
    statistics (unless ``update_stats=False``); ``infer`` mode is pure.
    Whether a graph is recorded depends only on :func:`tensor.no_grad`.
    """
    x = T.as_tensor(batch)
    s = model.config.input_size
    if x.ndim != 4 or x.shape[1:] != (s, s, 3):
        raise DimensionError(f"expected input (n, {s}, {s}, 3), got {x.shape}")
    update = mode == "train" if update_stats is None else update_stats
    h = x
    for spec, stage in zip(model.config.stages, model.backbone):
        for block in stage:
            h = L.conv2d(h, block.kernel)
            h = T.relu(L.batchnorm(h, block.bn, mode, update=update))
        if spec.pool:
            h = L.maxpool2d(h, 2, 2)
    features = h
    maps = [features]
    amap = cmap = None
    if model.position is not None:
        amap = position_attention(features, model.position, mode, update_stats=update).output
        maps.append(amap)
    if model.channel is not None:
        cmap = channel_attention(features, model.channel)
        maps.append(cmap)
    merged, pooled, head_input = fuse_maps(maps)
    z = head_input
    for i, (w, b) in enumerate(model.head):
        z = L.dense(z, w, b)
        if i < len(model.head) - 1:
            z = T.relu(L.batchnorm(z, model.head_bn[i], mode, update=update))
    probs = T.softmax(z, axis=-1)
    return ForwardOutput(probs, z, features, amap, cmap, merged, pooled, head_input)


def predict(model: Model, batch, chunk: int = 64) -> np.ndarray:
    """Infer-mode class probabilities without recording a graph."""
    batch = np.asarray(batch, dtype=np.float64)
    out = []
    with T.no_grad():
        for i in range(0, len(batch), chunk):
            out.append(forward(model, batch[i : i + chunk], "infer").probs.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.num_classes))


def save_checkpoint(model: Model, path) -> None:
    arrays = model.state_arrays()
    entries = []
    offset = 0
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    manifest = {
        "config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "tensors": entries,
        "blob_bytes": offset,
    }
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    line = json.dumps(manifest, separators=(",", ":"), ensure_ascii=False).encode("utf-8") + b"\n"
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + VERSION + b"\n" + line + blob)
    os.replace(tmp, path)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Model:
    """Rebuild a model from a checkpoint written by :func:`save_checkpoint`.

    When ``expected`` is given the stored config hash must match it.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError("magic: file does not start with b'HIEN'")
    if len(raw) < 6 or raw[5:6] != b"\n":
        raise FormatError("header: missing version byte or newline")
    if raw[4:5] != VERSION:
        raise FormatError(f"version: unsupported checkpoint version {raw[4:5]!r}")
    end = raw.find(b"\n", 6)
    if end < 0:
        raise FormatError("manifest: no terminating newline")
    try:
        manifest = json.loads(raw[6:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest: not valid UTF-8 JSON ({exc})") from None
    for key in ("config", "config_hash", "tensors", "blob_bytes"):
        if key not in manifest:
            raise FormatError(f"manifest: missing field {key!r}")
    config = ModelConfig.from_dict(manifest["config"])
    if config.config_hash() != manifest["config_hash"]:
        raise FormatError("config_hash: does not match the stored config")
    if expected is not None and expected.config_hash() != manifest["config_hash"]:
        raise FormatError("config_hash: checkpoint was written for a different model config")
    blob = raw[end + 1 :]
    if len(blob) != manifest["blob_bytes"]:
        raise FormatError(f"blob_bytes: manifest declares {manifest['blob_bytes']} bytes, found {len(blob)}")
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        if start < 0 or start + 4 * count > len(blob):
            raise FormatError(f"tensors[{entry['name']}].offset: range exceeds blob")
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
    model = build(config)
    model.load_state(arrays)
    return model
