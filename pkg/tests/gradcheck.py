"""Central finite-difference oracle for the autodiff ops.

Each case builds random inputs, wraps the differentiable ones as trainable
Parameters, and compares backward() against central differences of a random
linear functional of the op output.
"""
from __future__ import annotations

import numpy as np

from selora import autodiff as ad

STEP = 1e-5
# central differences at STEP carry ~1e-11 roundoff, so relative error is
# taken against max(|analytic|, |numeric|, FLOOR)
FLOOR = 1e-6


def _weighted_sum(out: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    return ad.tsum(ad.mul(out, ad.Tensor(w)))


def max_rel_error(fn, inputs: list[np.ndarray], diff_idx: list[int], rng) -> float:
    """Worst relative error over every differentiable input element."""
    params = [ad.Parameter(x.copy(), trainable=i in diff_idx) for i, x in enumerate(inputs)]
    out = fn(*params)
    w = rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape)
    ad.backward(_weighted_sum(out, w) if out.size > 1 else out)

    def f(vals):
        with ad.no_grad():
            o = fn(*[ad.Parameter(v) for v in vals])
        return float(np.sum(o.data * w))

    worst = 0.0
    for i in diff_idx:
        analytic = params[i].grad
        base = [x.copy() for x in inputs]
        for j in np.ndindex(inputs[i].shape):
            a = analytic[j]
            base[i][j] = inputs[i][j] + STEP
            up = f(base)
            base[i][j] = inputs[i][j] - STEP
            down = f(base)
            base[i][j] = inputs[i][j]
            num = (up - down) / (2 * STEP)
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), FLOOR))
    return worst


def _dims(rng, n, lo=1, hi=4):
    return [int(v) for v in rng.integers(lo, hi + 1, size=n)]


def case_matmul(rng):
    m, k, n = _dims(rng, 3)
    return ad.matmul, [rng.standard_normal((m, k)), rng.standard_normal((k, n))], [0, 1]


def case_matmul_batched(rng):
    b, m, k, n = _dims(rng, 4, hi=3)
    return ad.matmul, [rng.standard_normal((b, m, k)), rng.standard_normal((k, n))], [0, 1]


def case_linear(rng):
    b, din, dout = _dims(rng, 3)
    return ad.linear, [rng.standard_normal((b, 2, din)), rng.standard_normal((dout, din))], [0, 1]


def case_add(rng):
    a, b = _dims(rng, 2)
    lead = rng.integers(0, 2)
    x = rng.standard_normal((a, b))
    y = rng.standard_normal((b,)) if lead else rng.standard_normal((a, b))
    return ad.add, [x, y], [0, 1]


def case_mul(rng):
    a, b = _dims(rng, 2)
    lead = rng.integers(0, 2)
    x = rng.standard_normal((2, a, b))
    y = rng.standard_normal((a, b)) if lead else rng.standard_normal((2, a, b))
    return ad.mul, [x, y], [0, 1]


def case_scale(rng):
    c = float(rng.standard_normal())
    return (lambda x: ad.scale(x, c)), [rng.standard_normal(tuple(_dims(rng, 2)))], [0]


def case_gelu(rng):
    return ad.gelu, [2 * rng.standard_normal(tuple(_dims(rng, 2)))], [0]


def case_silu(rng):
    return ad.silu, [2 * rng.standard_normal(tuple(_dims(rng, 2)))], [0]


def case_sum(rng):
    return ad.tsum, [rng.standard_normal(tuple(_dims(rng, 2)))], [0]


def case_mean(rng):
    return ad.tmean, [rng.standard_normal(tuple(_dims(rng, 3)))], [0]


def case_rms_norm(rng):
    b, d = _dims(rng, 2, lo=2, hi=5)
    return ad.rms_norm, [rng.standard_normal((b, 2, d)), 1 + 0.3 * rng.standard_normal(d)], [0, 1]


def case_embedding(rng):
    v, d = _dims(rng, 2, lo=2, hi=5)
    ids = rng.integers(0, v, size=(2, 3))
    return (lambda t: ad.embedding(t, ids)), [rng.standard_normal((v, d))], [0]


def case_attention(rng):
    heads = int(rng.integers(1, 3))
    d = heads * int(rng.integers(1, 3))
    b, t = _dims(rng, 2, hi=3)
    xs = [rng.standard_normal((b, t, d)) for _ in range(3)]
    return (lambda q, k, v: ad.causal_attention(q, k, v, heads)), xs, [0, 1, 2]


def case_cross_entropy(rng):
    b, t, v = _dims(rng, 3, lo=2, hi=5)
    targets = rng.integers(0, v, size=(b, t))
    targets[0, 0] = -100
    return (lambda z: ad.softmax_cross_entropy(z, targets)), [2 * rng.standard_normal((b, t, v))], [0]


CASES = {
    "matmul": case_matmul,
    "matmul_batched": case_matmul_batched,
    "linear": case_linear,
    "add": case_add,
    "mul": case_mul,
    "scale": case_scale,
    "gelu": case_gelu,
    "silu": case_silu,
    "sum": case_sum,
    "mean": case_mean,
    "rms_norm": case_rms_norm,
    "embedding": case_embedding,
    "causal_attention": case_attention,
    "softmax_cross_entropy": case_cross_entropy,
}


def check_op(name: str, n_instances: int = 100, seed: int = 0) -> float:
    """Worst relative error of op ``name`` over ``n_instances`` random instances."""
    rng = np.random.default_rng([seed, sorted(CASES).index(name)])
    worst = 0.0
    for _ in range(n_instances):
        fn, inputs, diff = CASES[name](rng)
        worst = max(worst, max_rel_error(fn, inputs, diff, rng))
    return worst
