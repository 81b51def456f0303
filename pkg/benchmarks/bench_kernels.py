"""Time the numba kernels against their numpy fallbacks, then a short training run on each backend.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from selora import kernels
from selora.kernels import NUMBA_KERNELS, NUMPY_KERNELS


def cases(rng):
    x = rng.standard_normal((8 * 24, 128))
    gain = rng.standard_normal(128)
    _, inv = NUMPY_KERNELS.rmsnorm_fwd(x, gain, 1e-6)
    s = rng.standard_normal((8 * 4, 24, 24))
    p = NUMPY_KERNELS.causal_softmax_fwd(s)
    flat = rng.standard_normal(8 * 24 * 256)
    logits = rng.standard_normal((8 * 24, 64))
    targets = rng.integers(0, 64, size=8 * 24)
    w = rng.standard_normal(128 * 256)
    return {
        "rmsnorm_fwd": lambda k: k.rmsnorm_fwd(x, gain, 1e-6),
        "rmsnorm_bwd": lambda k: k.rmsnorm_bwd(x, x, gain, inv),
        "gelu_fwd": lambda k: k.gelu_fwd(flat),
        "gelu_bwd": lambda k: k.gelu_bwd(flat, flat),
        "causal_softmax_fwd": lambda k: k.causal_softmax_fwd(s),
        "causal_softmax_bwd": lambda k: k.causal_softmax_bwd(p, s),
        "cross_entropy": lambda k: k.cross_entropy(logits, targets, -100, True),
        "adamw": lambda k: k.adamw(w.copy(), w, np.zeros_like(w), np.zeros_like(w),
                                   1e-3, 0.9, 0.95, 1e-7, 0.01, 0.1, 0.05),
    }


TRAIN_SNIPPET = """
import time
from selora import kernels
from selora.campaign import DESK_MODELS
from selora.data import DatasetSpec, generate_dataset
from selora.model import build_model, inject_lora
from selora.probe import build_plan
from selora.trainer import TrainConfig, train
kernels.warmup()
cfg = DESK_MODELS["desk-12"]
data = generate_dataset(DatasetSpec(n_train=256, n_eval=16, seq_len=cfg.max_seq, vocab_size=cfg.vocab_size))
m = build_model(cfg)
inject_lora(m, build_plan(range(cfg.n_layers)))
r = train(m, data, TrainConfig(lr_max=1e-3, total_steps=20, warmup_steps=2))
print(kernels.BACKEND, r.wall_time_s)
"""


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    kernels.warmup(NUMBA_KERNELS)
    rng = np.random.default_rng(0)
    print(f"{'kernel':22s} {'numba us':>10s} {'numpy us':>10s} {'ratio':>7s}")
    for name, fn in cases(rng).items():
        t_nb = min(timeit.repeat(lambda: fn(NUMBA_KERNELS), number=args.repeat, repeat=3)) / args.repeat
        t_np = min(timeit.repeat(lambda: fn(NUMPY_KERNELS), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:22s} {1e6 * t_nb:10.1f} {1e6 * t_np:10.1f} {t_np / t_nb:7.2f}")
    print()
    print("20 training steps, desk-12, all-layer adapters:")
    for flag in ("1", "0"):
        env = dict(os.environ, SELORA_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"  {out[0]:6s} {float(out[1]):.2f}s")


if __name__ == "__main__":
    main()
