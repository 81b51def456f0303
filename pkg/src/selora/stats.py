"""Paired statistics for seed-matched experiment pairs.

Sample standard deviations use the n - 1 denominator everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special


@dataclass(frozen=True)
class SummaryStat:
    mean: float
    sd: float
    ci95_low: float
    ci95_high: float
    n: int

    @property
    def half_width(self) -> float:
        return (self.ci95_high - self.ci95_low) / 2.0


@dataclass(frozen=True)
class PairedSample:
    labels: tuple
    a: tuple
    b: tuple

    def __post_init__(self):
        if len(self.a) != len(self.b):
            raise ValueError(f"paired samples differ in length: {len(self.a)} vs {len(self.b)}")
        if len(self.a) < 2:
            raise ValueError("paired test needs n >= 2")
        if self.labels and len(self.labels) != len(self.a):
            raise ValueError("one label per pair required")

    @classmethod
    def of(cls, a: Sequence[float], b: Sequence[float], labels: Sequence = ()) -> "PairedSample":
        return cls(tuple(labels), tuple(float(x) for x in a), tuple(float(x) for x in b))


@dataclass(frozen=True)
class TTestResult:
    n: int
    mean_diff: float
    sd_diff: float
    t: float
    df: int
    p_two_sided: float
    cohens_d: float
    degenerate: bool = False


def student_t_cdf(t: float, df: int) -> float:
    """P(T <= t) for Student's t with ``df`` degrees of freedom."""
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    if t == 0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * float(special.betainc(df / 2.0, 0.5, x))
    return 1.0 - tail if t > 0 else tail


def student_t_ppf(q: float, df: int) -> float:
    """Quantile of Student's t (inverse of :func:`student_t_cdf`)."""
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    if not 0 < q < 1:
        raise ValueError(f"quantile must lie in (0, 1), got {q}")
    return float(special.stdtrit(df, q))


def t_critical(df: int, level: float = 0.95) -> float:
    return student_t_ppf(0.5 + level / 2.0, df)


def mean_sd(x: Sequence[float]) -> SummaryStat:
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("need at least two values for a sample standard deviation")
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    half = t_critical(n - 1) * sd / math.sqrt(n)
    return SummaryStat(mean, sd, mean - half, mean + half, n)


def paired_t_test(sample: PairedSample) -> TTestResult:
    d = np.asarray(sample.a) - np.asarray(sample.b)
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        return TTestResult(n, mean, 0.0, math.nan, n - 1, math.nan, math.nan, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * student_t_cdf(-abs(t), n - 1)
    return TTestResult(n, mean, sd, t, n - 1, p, mean / sd)


def format_mean_sd(stat: SummaryStat, digits: int = 4) -> str:
    return f"{stat.mean:.{digits}f} ± {stat.sd:.{digits}f}"
