"""Differentiable layers: convolution, pooling, dense, batch norm, activations.

Maps are ``(n, h, w, c)``; conv kernels are ``(kh, kw, c_in, c_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, make_op

BN_MOMENTUM = 0.99
BN_EPS = 1e-5
CE_CLAMP = 1e-12


# -- initialisers ------------------------------------------------------------

def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# -- convolution -------------------------------------------------------------

def _same_pad(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: str = "same",
) -> Tensor:
    """2-D cross-correlation of ``(n, h, w, c_in)`` maps plus optional bias.

    ``same`` zero-pads so the output extent is ``ceil(h / stride)`` (extra
    padding goes bottom/right); ``valid`` uses no padding.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise DimensionError(f"kernel expects {kcin} input channels, input has {cin}")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match {cout} output channels")

    if padding == "same":
        oh, pt, pb = _same_pad(h, kh, stride)
        ow, pl, pr = _same_pad(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
        if kh > h or kw > w:
            raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
    else:
        raise ContractError(f"unknown padding {padding!r}")

    wmat = kernel.data.reshape(kh * kw * cin, cout)

    if kh == 1 and kw == 1 and stride == 1:
        cols = x.data.reshape(-1, cin)
        xp_shape = None
    else:
        xp = x.data
        if pt or pb or pl or pr:
            xp = np.pad(xp, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        xp_shape = xp.shape
        cols = np.empty((n, oh, ow, kh, kw, cin))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
        cols = cols.reshape(n * oh * ow, kh * kw * cin)

    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, cout)

    def bw(g):
        g2 = np.ascontiguousarray(g).reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat.T
            if xp_shape is None:
                gx = dcols.reshape(x.shape)
            else:
                dcols = dcols.reshape(n, oh, ow, kh, kw, cin)
                gxp = np.zeros(xp_shape)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += dcols[:, :, :, i, j, :]
                gx = gxp[:, pt : pt + h, pl : pl + w, :]
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_op(out, parents, bw)


# -- pooling -----------------------------------------------------------------

def maxpool(x: Tensor, window: int = 2, stride: int | None = None, axes=(1, 2)) -> Tensor:
    """Max pooling over one or two axes with square windows, no padding.

    Trailing positions that do not fill a whole window are dropped. Gradient
    flows only to the first (lowest linear index) maximum of each window.
    """
    x = as_tensor(x)
    stride = window if stride is None else stride
    axes = tuple(a % x.ndim for a in np.atleast_1d(axes))
    if window < 1 or stride < 1:
        raise ContractError("window and stride must be >= 1")
    d = len(axes)
    xt = np.moveaxis(x.data, axes, tuple(range(-d, 0)))
    lead = xt.shape[:-d]
    extents = xt.shape[-d:]
    outs = tuple((e - window) // stride + 1 if e >= window else 0 for e in extents)
    if any(o <= 0 for o in outs):
        raise DimensionError(f"max pool window {window} leaves no output for extents {extents}")

    if window == stride:
        trimmed = xt[(...,) + tuple(slice(0, o * window) for o in outs)]
        split = trimmed.reshape(lead + sum(((o, window) for o in outs), ()))
        nl = len(lead)
        order = tuple(range(nl)) + tuple(nl + 2 * i for i in range(d)) + tuple(nl + 2 * i + 1 for i in range(d))
        blocks = split.transpose(order).reshape(lead + outs + (window**d,))
    else:
        view = np.lib.stride_tricks.sliding_window_view(xt, (window,) * d, axis=tuple(range(len(lead), len(lead) + d)))
        view = view[(...,) + tuple(slice(None, None, stride) for _ in range(d)) + (slice(None),) * d]
        view = view[(...,) + tuple(slice(0, o) for o in outs) + (slice(None),) * d]
        blocks = view.reshape(lead + outs + (window**d,))
    arg = blocks.argmax(axis=-1)
    out_t = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    out = np.moveaxis(out_t, tuple(range(-d, 0)), axes)

    def bw(g):
        gt = np.moveaxis(g, axes, tuple(range(-d, 0)))
        if window == stride:
            onehot = np.zeros(blocks.shape)
            np.put_along_axis(onehot, arg[..., None], gt[..., None], axis=-1)
            nl = len(lead)
            inner = onehot.reshape(lead + outs + (window,) * d)
            back = tuple(range(nl)) + sum(((nl + i, nl + d + i) for i in range(d)), ())
            inner = inner.transpose(back).reshape(lead + tuple(o * window for o in outs))
            full = np.zeros(xt.shape)
            full[(...,) + tuple(slice(0, o * window) for o in outs)] = inner
        else:
            full = np.zeros(xt.shape)
            offs = np.unravel_index(arg, (window,) * d)
            grids = np.meshgrid(*[np.arange(o) for o in outs], indexing="ij")
            lead_idx = np.indices(lead) if lead else ()
            idx = []
            for k in range(len(lead)):
                idx.append(np.broadcast_to(lead_idx[k][(...,) + (None,) * d], arg.shape))
            for k in range(d):
                idx.append(np.broadcast_to(grids[k] * stride, arg.shape) + offs[k])
            np.add.at(full, tuple(idx), gt)
        return (np.moveaxis(full, tuple(range(-d, 0)), axes),)

    return make_op(out, (x,), bw)


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    return maxpool(x, window, stride, axes=(1, 2))


def maxpool_rows(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Pool a ``(..., positions, c)`` matrix along the position axis."""
    return maxpool(x, window, stride, axes=(-2,))


# -- dense / normalisation / activations --------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    y = x @ weight if x.ndim >= 2 else T.reshape(T.reshape(x, (1, -1)) @ weight, (-1,))
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"dense: bias {bias.shape} vs {weight.shape[1]} outputs")
        y = y + bias
    return y


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return T.matmul(a, b)


@dataclass
class BatchNormState:
    """Affine parameters and running statistics for one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int) -> BatchNormState:
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
        )


def batchnorm(x: Tensor, state: BatchNormState, mode: str = "train", update: bool = True) -> Tensor:
    """Normalise over every axis except the last (channel) one.

    ``train`` uses batch statistics and updates the running estimates;
    ``infer`` is a fixed affine map built from the running estimates.
    Pass ``update=False`` to leave the running estimates untouched in train
    mode.
    """
    x = as_tensor(x)
    c = x.shape[-1]
    if state.gamma.shape != (c,):
        raise DimensionError(f"batchnorm has {state.gamma.shape[0]} channels, input has {c}")
    gamma, beta = state.gamma, state.beta
    if mode == "infer":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv
        out = xhat * gamma.data + beta.data
        red = tuple(range(x.ndim - 1))

        def bw_infer(g):
            return g * (gamma.data * inv), (g * xhat).sum(axis=red), g.sum(axis=red)

        return make_op(out, (x, gamma, beta), bw_infer)
    if mode != "train":
        raise ContractError(f"unknown batchnorm mode {mode!r}")

    red = tuple(range(x.ndim - 1))
    m = x.size // c
    mu = x.data.mean(axis=red)
    xc = x.data - mu
    var = (xc * xc).mean(axis=red)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    if update:
        unbiased = var * m / (m - 1) if m > 1 else var
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mu
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * unbiased

    def bw(g):
        gg = g.sum(axis=red)
        gx_hat_sum = (g * xhat).sum(axis=red)
        gx = (gamma.data * inv / m) * (m * g - gg - xhat * gx_hat_sum)
        return gx, gx_hat_sum, gg

    return make_op(out, (x, gamma, beta), bw)


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return T.relu(x)
    if kind == "sigmoid":
        return T.sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


relu = T.relu
sigmoid = T.sigmoid
softmax = T.softmax


def gap(x: Tensor) -> Tensor:
    """Global average pooling: ``(n, h, w, c) -> (n, c)``."""
    return T.mean(x, axis=(1, 2))


def flatten(x: Tensor) -> Tensor:
    """Row-major unroll of everything but the batch axis."""
    return T.reshape(x, (x.shape[0], -1))


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of ``-ln(p[label])`` over the batch, clamping p at 1e-12."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise DimensionError(f"cross_entropy: probs {probs.shape}, labels {labels.shape}")
    n, k = probs.shape
    if np.any(labels < 0) or np.any(labels >= k):
        raise ContractError(f"labels must lie in 0..{k - 1}")
    rows = np.arange(n)
    p = probs.data[rows, labels]
    clamped = np.maximum(p, CE_CLAMP)
    loss = -np.log(clamped).mean()

    def bw(g):
        out = np.zeros((n, k))
        out[rows, labels] = np.where(p > CE_CLAMP, -1.0 / (n * clamped), 0.0)
        return (out * g,)

    return make_op(np.asarray(loss), (probs,), bw)
