import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selora.stats import (PairedSample, format_mean_sd, mean_sd, paired_t_test, student_t_cdf,
                          student_t_ppf, t_critical)


def _cdf_by_quadrature(t, df):
    mpmath.mp.dps = 30
    nu = mpmath.mpf(df)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    pdf = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)
    return float(mpmath.mpf("0.5") + mpmath.quad(pdf, [0, t]))


@pytest.mark.parametrize("df", [1, 2, 3, 5, 10, 30, 60])
def test_cdf_matches_quadrature(df):
    for t in (-7.5, -2.0, -0.3, 0.0, 0.9, 2.5, 12.0):
        assert abs(student_t_cdf(t, df) - _cdf_by_quadrature(t, df)) < 1e-8


def test_cauchy_closed_form():
    for t in (-3.0, 0.5, 4.0):
        assert abs(student_t_cdf(t, 1) - (0.5 + math.atan(t) / math.pi)) < 1e-14


def test_critical_values():
    assert abs(t_critical(2) - 4.3027) < 1e-3
    assert abs(t_critical(1) - 12.7062) < 1e-3
    assert abs(student_t_cdf(student_t_ppf(0.975, 7), 7) - 0.975) < 1e-12
    with pytest.raises(ValueError):
        student_t_ppf(1.0, 3)
    with pytest.raises(ValueError):
        student_t_cdf(1.0, 0)


def test_paired_t_test_hand_values():
    r = paired_t_test(PairedSample.of([1.0, 2.0, 3.0], [0.0, 0.0, 0.0]))
    assert round(r.t, 4) == 3.4641 and r.df == 2 and r.cohens_d == 2.0
    assert abs(r.p_two_sided - 0.0742) < 1e-4
    assert not r.degenerate


def test_degenerate_constant_difference():
    r = paired_t_test(PairedSample.of([2.0, 3.0, 4.0], [1.0, 2.0, 3.0]))
    assert r.degenerate and math.isnan(r.p_two_sided) and r.mean_diff == 1.0


def test_mean_sd_and_interval():
    s = mean_sd([1.0, 2.0, 3.0])
    assert s.mean == 2.0 and s.sd == 1.0 and s.n == 3
    assert abs(s.half_width - 4.302652729911275 / math.sqrt(3)) < 1e-9
    assert format_mean_sd(mean_sd([0.3443, 0.3444, 0.3445])) == "0.3444 ± 0.0001"
    with pytest.raises(ValueError):
        mean_sd([1.0])


def test_sample_validation():
    with pytest.raises(ValueError, match="length"):
        PairedSample.of([1, 2], [1])
    with pytest.raises(ValueError, match="n >= 2"):
        PairedSample.of([1], [1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=8), st.floats(-50, 50), st.floats(0.1, 10))
def test_paired_t_invariances(xs, shift, scale):
    rng = np.random.default_rng(len(xs))
    b = rng.standard_normal(len(xs))
    a = b + np.array(xs)
    if np.std(xs) < 1e-6 * (1 + np.max(np.abs(xs))):
        return
    base = paired_t_test(PairedSample.of(a, b))
    shifted = paired_t_test(PairedSample.of(a + shift, b + shift))
    scaled = paired_t_test(PairedSample.of(a * scale, b * scale))
    swapped = paired_t_test(PairedSample.of(b, a))
    assert abs(shifted.t - base.t) <= 1e-6 * max(1, abs(base.t))
    assert abs(scaled.t - base.t) <= 1e-6 * max(1, abs(base.t))
    assert abs(swapped.t + base.t) <= 1e-9 * max(1, abs(base.t))
    assert abs(swapped.p_two_sided - base.p_two_sided) < 1e-9
