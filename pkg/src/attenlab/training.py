"""Preprocessing, flip augmentation, Adam, plateau LR decay, training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ContractError, InputError, NumericError
from .model import Model, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    decay_factor: float = 0.5
    patience: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 20
    seed: int = 7

    def validate(self) -> None:
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("Adam betas must lie in [0, 1)")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch size must be >= 1 and epochs >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ContractError("decay factor must lie in (0, 1]")


# -- preprocessing -----------------------------------------------------------

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping.

    Works on ``(h, w)`` or ``(h, w, c)`` arrays; same-size input is returned
    unchanged (as float64).
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h == 0 or w == 0:
        raise InputError("cannot resize a zero-area image")
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    if img.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def preprocess(image: np.ndarray, size: int) -> np.ndarray:
    """Resize an 8-bit RGB image to ``size x size`` and z-score each channel."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected an (h, w, 3) RGB image, got shape {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise InputError("zero-area image")
    x = resize_bilinear(image, size, size)
    mu = x.mean(axis=(0, 1))
    sd = np.maximum(x.std(axis=(0, 1)), 1e-6)
    return (x - mu) / sd


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent 50% horizontal and 50% vertical flips."""
    hflip, vflip = rng.random(2) < 0.5
    return flip(image, bool(hflip), bool(vflip))


def flip(image: np.ndarray, horizontal: bool, vertical: bool) -> np.ndarray:
    out = image
    if horizontal:
        out = out[:, ::-1]
    if vertical:
        out = out[::-1]
    return np.ascontiguousarray(out)


# -- optimiser ---------------------------------------------------------------

@dataclass
class Adam:
    """Adam with bias correction over a fixed list of parameter tensors."""

    params: Sequence[T.Tensor]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient; Adam step aborted")
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params, grads, state: Adam, lr: float) -> None:
    """Functional form: assign ``grads`` to ``params`` and step ``state``."""
    for p, g in zip(params, grads):
        p.grad = np.asarray(g, dtype=np.float64)
    state.step(lr)


# -- LR schedule -------------------------------------------------------------

def lr_schedule(history: Sequence[float], current_lr: float, patience: int = 3, factor: float = 0.5) -> float:
    """LR to use after the last epoch of ``history`` (train accuracies).

    The wait counter grows on every epoch whose accuracy does not strictly
    beat the best so far and resets on improvement or after a reduction.
    A reduction fires when the counter reaches ``patience``.
    """
    if not history:
        raise ContractError("lr_schedule needs at least one completed epoch")
    best = -np.inf
    wait = 0
    fired = False
    for acc in history:
        fired = False
        if acc > best:
            best = acc
            wait = 0
        else:
            wait += 1
            if wait >= patience:
                fired = True
                wait = 0
    return current_lr * factor if fired else current_lr


# -- training loop -----------------------------------------------------------

@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "train_loss", "train_acc"])
            for row in zip(self.epochs, self.lr, self.train_loss, self.train_acc):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def make_batch(images: Sequence[np.ndarray], size: int, rng: np.random.Generator | None) -> np.ndarray:
    out = np.empty((len(images), size, size, 3))
    for i, img in enumerate(images):
        if rng is not None:
            img = augment(img, rng)
        out[i] = preprocess(img, size)
    return out


def train(
    model: Model,
    images: Sequence[np.ndarray],
    labels: Sequence[int],
    config: TrainConfig = TrainConfig(),
    on_epoch: Callable[[int, float, float, float], None] | None = None,
) -> TrainHistory:
    """Minibatch training with flips, z-scoring, cross-entropy, and Adam.

    Batch order and flips come from per-epoch generators derived from
    ``config.seed``, so a run is reproducible bit-for-bit. The last partial
    batch is kept.
    """
    config.validate()
    labels = np.asarray(labels, dtype=np.int64)
    n = len(images)
    if n == 0:
        raise InputError("cannot train on an empty dataset")
    k = model.config.num_classes
    if np.any(labels < 0) or np.any(labels >= k):
        raise ContractError(f"labels must lie in 0..{k - 1}")
    size = model.config.input_size
    opt = Adam(model.parameters(), config.beta1, config.beta2, config.eps)
    lr = config.lr
    history = TrainHistory()
    for epoch in range(1, config.epochs + 1):
        order = epoch_rng(config.seed, epoch, 0).permutation(n)
        flips = epoch_rng(config.seed, epoch, 1)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = make_batch([images[i] for i in idx], size, flips)
            y = labels[idx]
            model.zero_grad()
            out = forward(model, x, "train")
            loss = L.cross_entropy(out.probs, y)
            T.backward(loss)
            opt.step(lr)
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(out.probs.data.argmax(axis=1) == y))
        history.epochs.append(epoch)
        history.lr.append(lr)
        history.train_loss.append(loss_sum / n)
        history.train_acc.append(correct / n)
        log.info("epoch %d lr %.6g loss %.4f acc %.4f", epoch, lr, loss_sum / n, correct / n)
        if on_epoch is not None:
            on_epoch(epoch, lr, loss_sum / n, correct / n)
        lr = lr_schedule(history.train_acc, lr, config.patience, config.decay_factor)
    model.zero_grad()
    return history
