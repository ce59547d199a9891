"""Hot loop kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``LIQUIDTAD_USE_NUMBA`` is not set to ``0``.  Both paths are always
importable (``*_numpy`` / ``*_numba``) so tests and the kernel benchmark can
compare them directly.
"""
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("LIQUIDTAD_USE_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# depthwise 1d convolution, "same" zero padding, cross-correlation convention
# y[t, c] = sum_j k[j, c] * x[t + j - K//2, c]


def conv_dw_forward_numpy(x, k):
    T = x.shape[0]
    K = k.shape[0]
    p = K // 2
    xp = np.zeros((T + 2 * p, x.shape[1]), dtype=x.dtype)
    xp[p:p + T] = x
    y = np.zeros_like(x)
    for j in range(K):
        y += k[j] * xp[j:j + T]
    return y


def conv_dw_backward_numpy(gy, x, k):
    T = x.shape[0]
    K = k.shape[0]
    p = K // 2
    xp = np.zeros((T + 2 * p, x.shape[1]), dtype=x.dtype)
    xp[p:p + T] = x
    gxp = np.zeros_like(xp)
    gk = np.empty_like(k)
    for j in range(K):
        gk[j] = np.sum(gy * xp[j:j + T], axis=0)
        gxp[j:j + T] += k[j] * gy
    return gxp[p:p + T], gk


def _conv_dw_forward_loops(x, k):
    T, C = x.shape
    K = k.shape[0]
    p = K // 2
    y = np.zeros_like(x)
    for t in range(T):
        for j in range(K):
            s = t + j - p
            if s < 0 or s >= T:
                continue
            for c in range(C):
                y[t, c] += k[j, c] * x[s, c]
    return y


def _conv_dw_backward_loops(gy, x, k):
    T, C = x.shape
    K = k.shape[0]
    p = K // 2
    gx = np.zeros_like(x)
    gk = np.zeros_like(k)
    for t in range(T):
        for j in range(K):
            s = t + j - p
            if s < 0 or s >= T:
                continue
            for c in range(C):
                gk[j, c] += gy[t, c] * x[s, c]
                gx[s, c] += k[j, c] * gy[t, c]
    return gx, gk


# ---------------------------------------------------------------------------
# layer norm over the channel axis of a T x C array


def layer_norm_forward_numpy(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_backward_numpy(g, xhat, rstd, gamma):
    C = xhat.shape[1]
    ggamma = np.sum(g * xhat, axis=0)
    gbeta = np.sum(g, axis=0)
    gxh = g * gamma
    gx = rstd[:, None] * (gxh - gxh.mean(axis=1, keepdims=True)
                          - xhat * (np.sum(gxh * xhat, axis=1, keepdims=True) / C))
    return gx, ggamma, gbeta


def _layer_norm_forward_loops(x, gamma, beta, consts):
    # consts = [1/C, eps, 1] in x's dtype keeps float32 rows in float32
    T, C = x.shape
    inv_c, eps, one = consts[0], consts[1], consts[2]
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(T, dtype=x.dtype)
    for t in range(T):
        row = x[t]
        hr = xhat[t]
        yr = y[t]
        m = eps - eps
        for c in range(C):
            m += row[c]
        m *= inv_c
        v = eps - eps
        for c in range(C):
            d = row[c] - m
            hr[c] = d
            v += d * d
        r = one / np.sqrt(v * inv_c + eps)
        rstd[t] = r
        for c in range(C):
            h = hr[c] * r
            hr[c] = h
            yr[c] = h * gamma[c] + beta[c]
    return y, xhat, rstd


def _ln_consts(x, eps):
    return np.array([1.0 / x.shape[1], eps, 1.0], dtype=x.dtype)


def _all_finite_loops(flat):
    # v * 0 is NaN exactly when v is NaN or inf; one branch-free pass
    acc = flat[0] * 0
    for i in range(flat.shape[0]):
        acc += flat[i] * 0
    return acc == 0


def all_finite_numpy(a):
    if a.size < 4096:
        return bool(np.isfinite(a).all())
    # min/max propagate NaN and expose inf without allocating a mask
    return bool(np.isfinite(a.min()) and np.isfinite(a.max()))


def _layer_norm_backward_loops(g, xhat, rstd, gamma):
    T, C = xhat.shape
    gx = np.empty_like(xhat)
    ggamma = np.zeros_like(gamma)
    gbeta = np.zeros_like(gamma)
    for t in range(T):
        s1 = 0.0
        s2 = 0.0
        for c in range(C):
            gh = g[t, c] * gamma[c]
            s1 += gh
            s2 += gh * xhat[t, c]
            ggamma[c] += g[t, c] * xhat[t, c]
            gbeta[c] += g[t, c]
        s1 /= C
        s2 /= C
        for c in range(C):
            gx[t, c] = rstd[t] * (g[t, c] * gamma[c] - s1 - xhat[t, c] * s2)
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# non-overlapping temporal max pooling (window == stride), T divisible by s


def maxpool_forward_numpy(x, s):
    T, C = x.shape
    blocks = x.reshape(T // s, s, C)
    idx = np.argmax(blocks, axis=1)
    y = np.take_along_axis(blocks, idx[:, None, :], axis=1)[:, 0, :]
    return y, idx


def _maxpool_forward_loops(x, s):
    T, C = x.shape
    n = T // s
    y = np.empty((n, C), dtype=x.dtype)
    idx = np.zeros((n, C), dtype=np.int64)
    for i in range(n):
        base = i * s
        for c in range(C):
            y[i, c] = x[base, c]
        for j in range(1, s):
            for c in range(C):
                v = x[base + j, c]
                if v > y[i, c]:
                    y[i, c] = v
                    idx[i, c] = j
    return y, idx


# ---------------------------------------------------------------------------
# greedy hard NMS over 1d intervals already sorted by descending score


def nms_numpy(starts, ends, thr):
    n = starts.shape[0]
    keep = np.ones(n, dtype=np.bool_)
    for i in range(n):
        if not keep[i]:
            continue
        rest = np.arange(i + 1, n)
        rest = rest[keep[rest]]
        if rest.size == 0:
            break
        inter = np.clip(np.minimum(ends[i], ends[rest]) - np.maximum(starts[i], starts[rest]), 0.0, None)
        union = (ends[i] - starts[i]) + (ends[rest] - starts[rest]) - inter
        keep[rest[inter / union > thr]] = False
    return keep


def _nms_loops(starts, ends, thr):
    n = starts.shape[0]
    keep = np.ones(n, dtype=np.bool_)
    for i in range(n):
        if not keep[i]:
            continue
        for j in range(i + 1, n):
            if not keep[j]:
                continue
            inter = min(ends[i], ends[j]) - max(starts[i], starts[j])
            if inter <= 0.0:
                continue
            union = (ends[i] - starts[i]) + (ends[j] - starts[j]) - inter
            if inter / union > thr:
                keep[j] = False
    return keep


# reassociation only; nnan/ninf stay off so non-finite values still propagate
_FASTMATH = {"reassoc", "contract", "arcp", "nsz"}

if HAS_NUMBA:
    conv_dw_forward_numba = njit(cache=True, fastmath=_FASTMATH)(_conv_dw_forward_loops)
    conv_dw_backward_numba = njit(cache=True, fastmath=_FASTMATH)(_conv_dw_backward_loops)
    maxpool_forward_numba = njit(cache=True, fastmath=_FASTMATH)(_maxpool_forward_loops)
    _layer_norm_forward_jit = njit(cache=True, fastmath=_FASTMATH)(_layer_norm_forward_loops)
    _all_finite_jit = njit(cache=True, fastmath=_FASTMATH)(_all_finite_loops)
    layer_norm_backward_numba = njit(cache=True, fastmath=_FASTMATH)(_layer_norm_backward_loops)
    nms_numba = njit(cache=True, fastmath=_FASTMATH)(_nms_loops)
else:  # pragma: no cover
    conv_dw_forward_numba = _conv_dw_forward_loops
    conv_dw_backward_numba = _conv_dw_backward_loops
    maxpool_forward_numba = _maxpool_forward_loops
    _layer_norm_forward_jit = _layer_norm_forward_loops
    _all_finite_jit = _all_finite_loops
    layer_norm_backward_numba = _layer_norm_backward_loops
    nms_numba = _nms_loops


def layer_norm_forward_numba(x, gamma, beta, eps):
    return _layer_norm_forward_jit(x, gamma, beta, _ln_consts(x, eps))


def all_finite_numba(a):
    if a.size < 4096:
        return bool(np.isfinite(a).all())
    return bool(_all_finite_jit(a.reshape(-1)))


if USE_NUMBA:
    conv_dw_forward = conv_dw_forward_numba
    conv_dw_backward = conv_dw_backward_numba
    maxpool_forward = maxpool_forward_numba
    layer_norm_forward = layer_norm_forward_numba
    layer_norm_backward = layer_norm_backward_numba
    nms = nms_numba
    all_finite = all_finite_numba
else:
    conv_dw_forward = conv_dw_forward_numpy
    conv_dw_backward = conv_dw_backward_numpy
    maxpool_forward = maxpool_forward_numpy
    layer_norm_forward = layer_norm_forward_numpy
    layer_norm_backward = layer_norm_backward_numpy
    nms = nms_numpy
    all_finite = all_finite_numpy


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
