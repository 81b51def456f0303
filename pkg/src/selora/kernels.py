"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

The module-level names (``rmsnorm_fwd`` and friends) are bound to the numba
flavour when ``selora._numba.USE_NUMBA`` is true and to the numpy flavour
otherwise. Both flavours stay importable as ``NUMBA_KERNELS`` and
``NUMPY_KERNELS`` so tests and the benchmark script can compare them.

All kernels take 2-D (or flat) C-contiguous arrays; shape handling lives in
:mod:`selora.autodiff`.
"""
from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np

from ._numba import HAVE_NUMBA, USE_NUMBA, njit

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


# --------------------------------------------------------------------------
# numba flavour (explicit loops)
# --------------------------------------------------------------------------

@njit
def _rmsnorm_fwd_nb(x, gain, eps):
    n, d = x.shape
    y = np.empty_like(x)
    inv = np.empty(n, dtype=x.dtype)
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += x[i, j] * x[i, j]
        r = 1.0 / math.sqrt(acc / d + eps)
        inv[i] = r
        for j in range(d):
            y[i, j] = x[i, j] * r * gain[j]
    return y, inv


@njit
def _rmsnorm_bwd_nb(g, x, gain, inv):
    n, d = x.shape
    dx = np.empty_like(x)
    dgain = np.zeros(d, dtype=x.dtype)
    for i in range(n):
        r = inv[i]
        dot = 0.0
        for j in range(d):
            dot += g[i, j] * gain[j] * x[i, j]
        c = r * r * r * dot / d
        for j in range(d):
            dx[i, j] = r * gain[j] * g[i, j] - x[i, j] * c
            dgain[j] += g[i, j] * x[i, j] * r
    return dx, dgain


@njit
def _gelu_fwd_nb(x):
    out = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        u = GELU_C * (v + GELU_K * v * v * v)
        out[i] = v / (1.0 + math.exp(-2.0 * u))
    return out


@njit
def _gelu_bwd_nb(x, g):
    out = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        u = GELU_C * (v + GELU_K * v * v * v)
        s = 1.0 / (1.0 + math.exp(-2.0 * u))
        du = GELU_C * (1.0 + 3.0 * GELU_K * v * v)
        out[i] = g[i] * (s + 2.0 * v * s * (1.0 - s) * du)
    return out


@njit
def _causal_softmax_fwd_nb(s):
    n, t, _ = s.shape
    p = np.zeros_like(s)
    for b in range(n):
        for i in range(t):
            m = s[b, i, 0]
            for j in range(1, i + 1):
                if s[b, i, j] > m:
                    m = s[b, i, j]
            z = 0.0
            for j in range(i + 1):
                e = math.exp(s[b, i, j] - m)
                p[b, i, j] = e
                z += e
            for j in range(i + 1):
                p[b, i, j] /= z
    return p


@njit
def _causal_softmax_bwd_nb(p, g):
    n, t, _ = p.shape
    ds = np.zeros_like(p)
    for b in range(n):
        for i in range(t):
            dot = 0.0
            for j in range(i + 1):
                dot += g[b, i, j] * p[b, i, j]
            for j in range(i + 1):
                ds[b, i, j] = p[b, i, j] * (g[b, i, j] - dot)
    return ds


@njit
def _cross_entropy_nb(logits, targets, ignore_index, want_grad):
    n, v = logits.shape
    total = 0.0
    count = 0
    grad = np.zeros_like(logits) if want_grad else np.zeros((0, v), dtype=logits.dtype)
    for i in range(n):
        tgt = targets[i]
        if tgt == ignore_index:
            continue
        m = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > m:
                m = logits[i, j]
        z = 0.0
        if want_grad:
            for j in range(v):
                e = math.exp(logits[i, j] - m)
                grad[i, j] = e
                z += e
            for j in range(v):
                grad[i, j] /= z
            grad[i, tgt] -= 1.0
        else:
            for j in range(v):
                z += math.exp(logits[i, j] - m)
        total += m + math.log(z) - logits[i, tgt]
        count += 1
    return total, count, grad


@njit
def _adamw_nb(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    decay = 1.0 - lr * wd
    for i in range(p.size):
        gi = g[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        p[i] = p[i] * decay - lr * mhat / (math.sqrt(vhat) + eps)


# --------------------------------------------------------------------------
# numpy flavour (vectorised)
# --------------------------------------------------------------------------

def _rmsnorm_fwd_np(x, gain, eps):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=1) + eps)
    return x * inv[:, None] * gain, inv


def _rmsnorm_bwd_np(g, x, gain, inv):
    d = x.shape[1]
    dot = np.sum(g * gain * x, axis=1)
    c = inv**3 * dot / d
    dx = inv[:, None] * gain * g - x * c[:, None]
    dgain = np.sum(g * x * inv[:, None], axis=0)
    return dx, dgain


def _gelu_fwd_np(x):
    u = GELU_C * (x + GELU_K * x * x * x)
    return x / (1.0 + np.exp(-2.0 * u))


def _gelu_bwd_np(x, g):
    u = GELU_C * (x + GELU_K * x * x * x)
    s = 1.0 / (1.0 + np.exp(-2.0 * u))
    du = GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return g * (s + 2.0 * x * s * (1.0 - s) * du)


_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(t):
    mask = _MASKS.get(t)
    if mask is None:
        mask = np.triu(np.ones((t, t), dtype=bool), k=1)
        _MASKS[t] = mask
    return mask


def _causal_softmax_fwd_np(s):
    mask = _causal_mask(s.shape[-1])
    z = np.where(mask, -np.inf, s)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _causal_softmax_bwd_np(p, g):
    dot = np.sum(g * p, axis=-1, keepdims=True)
    return p * (g - dot)


def _cross_entropy_np(logits, targets, ignore_index, want_grad):
    valid = targets != ignore_index
    rows = np.flatnonzero(valid)
    count = rows.size
    grad = np.zeros_like(logits) if want_grad else np.zeros((0, logits.shape[1]), logits.dtype)
    if count == 0:
        return 0.0, 0, grad
    z = logits[rows]
    tgt = targets[rows]
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    total = float(np.sum(lse - z[np.arange(count), tgt]))
    if want_grad:
        probs = np.exp(z - lse[:, None])
        probs[np.arange(count), tgt] -= 1.0
        grad[rows] = probs
    return total, count, grad


def _adamw_np(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / bc1
    vhat = v / bc2
    p *= 1.0 - lr * wd
    p -= lr * mhat / (np.sqrt(vhat) + eps)


NUMBA_KERNELS = SimpleNamespace(
    name="numba",
    rmsnorm_fwd=_rmsnorm_fwd_nb,
    rmsnorm_bwd=_rmsnorm_bwd_nb,
    gelu_fwd=_gelu_fwd_nb,
    gelu_bwd=_gelu_bwd_nb,
    causal_softmax_fwd=_causal_softmax_fwd_nb,
    causal_softmax_bwd=_causal_softmax_bwd_nb,
    cross_entropy=_cross_entropy_nb,
    adamw=_adamw_nb,
)

NUMPY_KERNELS = SimpleNamespace(
    name="numpy",
    rmsnorm_fwd=_rmsnorm_fwd_np,
    rmsnorm_bwd=_rmsnorm_bwd_np,
    gelu_fwd=_gelu_fwd_np,
    gelu_bwd=_gelu_bwd_np,
    causal_softmax_fwd=_causal_softmax_fwd_np,
    causal_softmax_bwd=_causal_softmax_bwd_np,
    cross_entropy=_cross_entropy_np,
    adamw=_adamw_np,
)

ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS
BACKEND = ACTIVE.name

rmsnorm_fwd = ACTIVE.rmsnorm_fwd
rmsnorm_bwd = ACTIVE.rmsnorm_bwd
gelu_fwd = ACTIVE.gelu_fwd
gelu_bwd = ACTIVE.gelu_bwd
causal_softmax_fwd = ACTIVE.causal_softmax_fwd
causal_softmax_bwd = ACTIVE.causal_softmax_bwd
cross_entropy = ACTIVE.cross_entropy
adamw = ACTIVE.adamw



def warmup(kernels=None, dtypes=(np.float64, np.float32)) -> None:
    """Call every kernel once per dtype so JIT loading happens outside timed code."""
    k = kernels or ACTIVE
    for dt in dtypes:
        x = np.ones((2, 3), dtype=dt)
        gain = np.ones(3, dtype=dt)
        y, inv = k.rmsnorm_fwd(x, gain, 1e-6)
        k.rmsnorm_bwd(x, x, gain, inv)
        k.gelu_fwd(gain)
        k.gelu_bwd(gain, gain)
        s = np.ones((1, 2, 2), dtype=dt)
        p = k.causal_softmax_fwd(s)
        k.causal_softmax_bwd(p, s)
        t = np.array([0, -100], dtype=np.int64)
        k.cross_entropy(x, t, -100, True)
        k.cross_entropy(x, t, -100, False)
        flat = np.zeros(3, dtype=dt)
        k.adamw(flat.copy(), flat, flat.copy(), flat.copy(), 1e-3, 0.9, 0.95, 1e-7, 0.0, 0.1, 0.05)


__all__ = [
    "ACTIVE",
    "BACKEND",
    "HAVE_NUMBA",
    "NUMBA_KERNELS",
    "NUMPY_KERNELS",
    "adamw",
    "causal_softmax_bwd",
    "causal_softmax_fwd",
    "cross_entropy",
    "gelu_bwd",
    "gelu_fwd",
    "rmsnorm_bwd",
    "rmsnorm_fwd",
    "warmup",
]
