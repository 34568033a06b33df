import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from ccdopf.uncertainty import (UncertaintyModel, binomial_tolerance, forecast_range_check, inv_norm_cdf,
                                monte_carlo_violation, norm_cdf, pf_coupling_rows, quantile, sample_pv,
                                soc_form, tighten_pf_coupling, tighten_scalar, tighten_soc)


def bisect_quantile(p, lo=-12.0, hi=12.0):
    """Independent oracle: bisection on the erfc normal CDF (upper tail above the median)."""
    tail = 1.0 - p  # exact for p >= 0.5
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = 0.5 * math.erfc(-mid / math.sqrt(2)) < p if p < 0.5 else 0.5 * math.erfc(mid / math.sqrt(2)) > tail
        if below:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_quantile_values():
    assert inv_norm_cdf(0.95) == pytest.approx(1.6449, abs=1e-4)
    assert quantile(0.05) == pytest.approx(bisect_quantile(0.95), abs=1e-12)
    assert inv_norm_cdf(0.5) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        inv_norm_cdf(1.0)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-10, 1 - 1e-10))
def test_quantile_matches_bisection(p):
    assert inv_norm_cdf(p) == pytest.approx(bisect_quantile(p), abs=1e-9)
    assert norm_cdf(inv_norm_cdf(p)) == pytest.approx(p, rel=1e-9)


def test_scalar_tightening():
    assert tighten_scalar(1.0, 1.0, 0.1, 1.2, 0.05) == pytest.approx(0.03551, abs=1e-4)
    assert tighten_scalar(1.0, 1.0, 0.0, 1.2, 0.05) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        tighten_scalar(1.0, 1.0, -0.1, 1.2, 0.05)


def test_soc_agrees_with_scalar():
    m = tighten_soc([1.0], [1.0], [[0.01]], 1.2, 0.05)
    assert m == pytest.approx(tighten_scalar(1.0, 1.0, 0.1, 1.2, 0.05), abs=1e-14)
    t, res = soc_form([1.0], [1.0], [[0.01]], 1.2, 0.05)
    assert t == pytest.approx(0.1) and res == pytest.approx(-m)


def test_forecast_range_check():
    bad = UncertaintyModel({1: 1.0}, {1: 0.1}, forecast_hi={1: 1.1})
    assert len(forecast_range_check(bad)[1]) == 1
    good = UncertaintyModel({1: 1.0}, {1: 0.1}, forecast_hi={1: 1.17})
    assert forecast_range_check(good)[1] == []


def test_pf_coupling_margin():
    m = UncertaintyModel({1: 1.0}, {1: 0.1})
    upper, lower = tighten_pf_coupling(1, m, 0.5, 0.0, 0.0, 0.9)
    assert upper == pytest.approx(0.9 - 0.14804 - 0.5, abs=1e-3)
    assert lower == pytest.approx(0.9 - 0.14804 + 0.5, abs=1e-3)
    rows = pf_coupling_rows(1, m, 0.2, 0.9)
    assert rows[0][2] == pytest.approx(0.9 - 0.9 * 0.1 * quantile(0.05) - 0.2)


def test_model_validation():
    with pytest.raises(ValueError):
        UncertaintyModel({1: 1.0}, {1: 0.1}, epsilon=0.5)
    with pytest.raises(ValueError):
        UncertaintyModel({1: 1.0}, {1: -0.1})
    with pytest.raises(ValueError):
        UncertaintyModel({1: 1.0}, {1: 0.1}, forecast_hi={1: 0.9})
    m = UncertaintyModel.from_forecast({1: 0.4}, 0.1, sigma_mode="variance")
    assert m.sigma[1] == pytest.approx(math.sqrt(0.04))


def test_sampling_is_worker_independent():
    m = UncertaintyModel.from_forecast({2: 0.5, 3: 0.2}, 0.1)
    a = sample_pv(m, 20000, seed=7)
    b = sample_pv(m, 20000, seed=7, workers=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_pv(m, 20000, seed=8))
    assert a.mean(axis=0) == pytest.approx([0.5, 0.2], abs=3e-3)


def test_boundary_tight_constraint_rate():
    # q placed exactly on the tightened pf boundary: violation probability equals epsilon
    m = UncertaintyModel({1: 1.0}, {1: 0.1}, epsilon=0.05)
    r = 0.9 * (1.0 - quantile(0.05) * 0.1)
    rates = monte_carlo_violation(m, {1: r}, {1: 0.9}, 100_000, seed=3)
    assert abs(rates["pf_upper[1]"] - 0.05) <= 0.007
    assert rates["pf_upper[1]"] <= 0.05 + binomial_tolerance(0.05, 100_000)


def test_zero_sigma_no_violations():
    m = UncertaintyModel({1: 1.0}, {1: 0.0}, forecast_lo={1: 0.8}, forecast_hi={1: 1.2})
    rates = monte_carlo_violation(m, {1: 0.5}, {1: 0.9}, 1000, seed=1)
    assert set(rates.values()) == {0.0}


@settings(max_examples=60, deadline=None)
@given(mu=st.floats(0.1, 1.0), frac=st.floats(0.01, 0.3), eps=st.floats(0.01, 0.3), slack=st.floats(-0.3, 0.3))
def test_margin_sign_predicts_violation_rate(mu, frac, eps, slack):
    m = UncertaintyModel({1: mu}, {1: frac * mu}, epsilon=eps)
    q = pf_coupling_rows(1, m, 0.0, 1.0)[0][2] + slack * frac * mu
    margin = tighten_pf_coupling(1, m, q, 0.0, 0.0, 1.0)[0]
    assume(abs(slack) > 1e-6)
    # q - p > 0 is violated when p < q
    exact = norm_cdf((q - mu) / (frac * mu))
    assert (margin >= 0) == (exact <= eps + 1e-12)
