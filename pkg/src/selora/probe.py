"""Gradient probe, top-k% layer selection and plan construction."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, backward
from .model import LoraPlan


@dataclass(frozen=True)
class ProbeConfig:
    n_batches: int = 5
    chunk_size: int = 8

    def __post_init__(self):
        if self.n_batches < 1:
            raise ValueError(f"n_batches must be >= 1, got {self.n_batches}")
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be >= 1, got {self.chunk_size}")


@dataclass(frozen=True)
class SelectionConfig:
    percent: float = 50.0

    def __post_init__(self):
        if not 0 < self.percent <= 100:
            raise ValueError(f"percent must be in (0, 100], got {self.percent}")


@dataclass
class ProbeReport:
    raw_norms: np.ndarray
    normalized: np.ndarray
    ranking: list[int]
    elapsed_s: float = 0.0

    @property
    def n_layers(self) -> int:
        return len(self.raw_norms)

    @classmethod
    def from_norms(cls, g, elapsed_s: float = 0.0) -> "ProbeReport":
        g = np.asarray(g, dtype=np.float64)
        total = g.sum()
        normalized = g / total if total > 0 else np.zeros_like(g)
        return cls(g, normalized, rank_layers(g), elapsed_s)

    def to_json(self) -> str:
        return json.dumps({
            "layers": self.n_layers,
            "g": [float(v) for v in self.raw_norms],
            "normalized": [float(v) for v in self.normalized],
            "ranking": [int(v) for v in self.ranking],
        })

    @classmethod
    def from_json(cls, text: str) -> "ProbeReport":
        d = json.loads(text)
        report = cls(np.asarray(d["g"], dtype=np.float64),
                     np.asarray(d["normalized"], dtype=np.float64),
                     [int(v) for v in d["ranking"]])
        if len(report.raw_norms) != d["layers"] or sorted(report.ranking) != list(range(d["layers"])):
            raise ValueError("inconsistent probe report")
        return report


def rank_layers(g: Sequence[float]) -> list[int]:
    """Layer indices by descending score; equal scores keep the lower index first."""
    return sorted(range(len(g)), key=lambda i: (-float(g[i]), i))


def gradient_probe(model, batches: Sequence, config: ProbeConfig = ProbeConfig()) -> ProbeReport:
    """Sum over probe batches of each layer's gradient L2 norm.

    Layers are processed ``chunk_size`` at a time: only the parameters of the
    current chunk are trainable while its batches run. ``model`` needs
    ``n_layers``, ``parameters()``, ``layer_parameters(l)`` and ``loss(batch)``.
    Parameter values are never touched; trainability flags are restored and
    all gradients are zero on return.
    """
    L = model.n_layers
    if L < 1:
        raise ValueError("model has no layers to probe")
    if len(batches) < config.n_batches:
        raise ValueError(f"probe needs {config.n_batches} batches, got {len(batches)}")
    probe_batches = list(batches[:config.n_batches])
    params = model.parameters()
    saved = [p.trainable for p in params]
    for p in params:
        p.trainable = False
        p.zero_grad()

    staged = all(hasattr(model, a) for a in ("embed", "run_layers", "head_loss"))
    # hidden state entering the current chunk, per batch; frozen layers below a
    # chunk are therefore run once per batch instead of once per chunk
    hidden: list = [None] * len(probe_batches)

    t0 = time.perf_counter()
    g = np.zeros(L, dtype=np.float64)
    try:
        for start in range(0, L, config.chunk_size):
            stop = min(start + config.chunk_size, L)
            layer_params = {l: model.layer_parameters(l) for l in range(start, stop)}
            for ps in layer_params.values():
                for p in ps:
                    p.trainable = True
            for i, batch in enumerate(probe_batches):
                if staged:
                    inputs, targets = batch
                    x = Tensor(hidden[i]) if hidden[i] is not None else model.embed(inputs)
                    x = model.run_layers(x, start, stop)
                    hidden[i] = x.data
                    loss = model.head_loss(model.run_layers(x, stop), targets)
                else:
                    loss = model.loss(batch)
                backward(loss)
                for l, ps in layer_params.items():
                    sq = 0.0
                    for p in ps:
                        sq += float(np.dot(p.grad.ravel(), p.grad.ravel()))
                        p.zero_grad()
                    g[l] += math.sqrt(sq)
            for ps in layer_params.values():
                for p in ps:
                    p.trainable = False
    finally:
        for p, flag in zip(params, saved):
            p.trainable = flag
            p.zero_grad()
    return ProbeReport.from_norms(g, time.perf_counter() - t0)


def selection_count(percent: float, n_layers: int) -> int:
    """ceil(k * L / 100), at least one layer."""
    if n_layers < 1:
        raise ValueError("cannot select from zero layers")
    SelectionConfig(percent)
    # guard against float noise from non-integer percents, e.g. 0.07 * 300
    return max(1, math.ceil(round(percent * n_layers / 100.0, 9)))


def select_layers(report: ProbeReport, config: SelectionConfig | float, n_layers: int) -> list[int]:
    if n_layers < 1:
        raise ValueError("cannot select from zero layers")
    if report.n_layers != n_layers:
        raise ValueError(f"report covers {report.n_layers} layers, expected {n_layers}")
    percent = config.percent if isinstance(config, SelectionConfig) else float(config)
    return sorted(report.ranking[:selection_count(percent, n_layers)])


def build_plan(selected, attn_rank: int = 16, mlp_rank: int = 16, alpha: float = 32.0,
               **targets) -> LoraPlan:
    return LoraPlan(tuple(selected), attn_rank, mlp_rank, alpha, **targets)


def probe_overhead_fraction(probe_time: float, total_train_time: float) -> float:
    if probe_time <= 0 or total_train_time <= 0:
        raise ValueError("probe and training times must be positive")
    return probe_time / (probe_time + total_train_time)
