"""Slow, loop-based reference implementations used as test oracles.

Nothing here imports from the package under test.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import optimize, stats


def loop_matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def loop_dense(x, w, b):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(w.shape[1])
    for j in range(w.shape[1]):
        s = b[j]
        for i in range(w.shape[0]):
            s += x[i] * w[i, j]
        out[j] = s
    return out


def loop_conv2d(x, k, bias=None, stride=1, padding="same"):
    """Direct summation over one ``(h, w, cin)`` image, ``(kh, kw, cin, cout)`` kernel.

    "same" padding puts the extra row/column (for even totals) at the bottom/right.
    """
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        top, left = ph // 2, pw // 2
    else:
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        top = left = 0
    out = np.zeros((oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            for o in range(cout):
                s = 0.0 if bias is None else bias[o]
                for di in range(kh):
                    for dj in range(kw):
                        yi = i * stride + di - top
                        xj = j * stride + dj - left
                        if 0 <= yi < h and 0 <= xj < w:
                            for c in range(cin):
                                s += x[yi, xj, c] * k[di, dj, c, o]
                out[i, j, o] = s
    return out


def loop_maxpool2d(x, window, stride):
    h, w, c = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            for ch in range(c):
                best = -math.inf
                for di in range(window):
                    for dj in range(window):
                        best = max(best, x[i * stride + di, j * stride + dj, ch])
                out[i, j, ch] = best
    return out


def softmax_rows(z):
    out = np.zeros_like(z, dtype=np.float64)
    for i, row in enumerate(z):
        m = max(row)
        e = [math.exp(v - m) for v in row]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def position_attention_loops(fmap, wk, bk, wq, bq, wv, bv, wa, ba):
    """Non-local block on one ``(h, w, c)`` map without batch norm.

    Rows are positions in row-major order; queries/values keep the larger of
    each consecutive pair of rows, per channel.
    """
    h, w, c = fmap.shape
    x = fmap.reshape(h * w, c)
    keys = loop_matmul(x, wk) + bk
    q_full = loop_matmul(x, wq) + bq
    v_full = loop_matmul(x, wv) + bv
    half = (h * w) // 2
    q = np.array([[max(q_full[2 * r, ch], q_full[2 * r + 1, ch]) for ch in range(c)] for r in range(half)])
    v = np.array([[max(v_full[2 * r, ch], v_full[2 * r + 1, ch]) for ch in range(c)] for r in range(half)])
    rel = softmax_rows(loop_matmul(keys, q.T))
    att = loop_matmul(rel, v)
    out = loop_matmul(att, wa) + ba
    return rel, att, out.reshape(h, w, c)


def channel_attention_loops(fmap, w1, b1, w2, b2):
    h, w, c = fmap.shape
    s = [sum(fmap[i, j, ch] for i in range(h) for j in range(w)) / (h * w) for ch in range(c)]
    hidden = [max(v, 0.0) for v in loop_dense(np.array(s), w1, b1)]
    z = loop_dense(np.array(hidden), w2, b2)
    gate = [1.0 / (1.0 + math.exp(-v)) for v in z]
    out = np.zeros_like(fmap)
    for ch in range(c):
        out[:, :, ch] = fmap[:, :, ch] * gate[ch]
    return out


def pairwise_auc(scores, labels):
    """Mann-Whitney estimate: P(score_pos > score_neg) + 0.5 P(tie)."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def roc_points_by_counting(scores, labels):
    """(fpr, tpr) for every distinct threshold t, predicting positive when score >= t."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = labels.sum()
    n_neg = (~labels).sum()
    pts = [(0.0, 0.0)]
    for t in sorted(set(scores.tolist()), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if y and s >= t)
        fp = sum(1 for s, y in zip(scores, labels) if not y and s >= t)
        pts.append((fp / n_neg, tp / n_pos))
    return np.array(pts)


def clopper_pearson_by_root(k, n, conf=0.95):
    """Exact interval by inverting the binomial tail probabilities with a root finder."""
    alpha = 1 - conf
    if k == 0:
        lo = 0.0
    else:
        lo = optimize.brentq(lambda p: stats.binom.sf(k - 1, n, p) - alpha / 2, 1e-15, 1 - 1e-15, xtol=1e-14)
    if k == n:
        hi = 1.0
    else:
        hi = optimize.brentq(lambda p: stats.binom.cdf(k, n, p) - alpha / 2, 1e-15, 1 - 1e-15, xtol=1e-14)
    return lo, hi


def central_difference(f, x, eps=1e-6):
    """Numerical gradient of scalar ``f`` over a float array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xp[idx] += eps
        xm = x.copy()
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g
