import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import factor
from crossalpha.errors import ConfigError, UndefinedMetricError
from crossalpha.evaluation import (
    FactorReport,
    evaluate_factor,
    ic_decay,
    information_coefficient,
    information_ratio,
    quality_filter,
    rolling_ic_mean,
    summarize_ic,
    write_reports_csv,
)
from crossalpha.panel import ReturnPanel, forward_returns
from crossalpha.synth import PlantedSignalSpec, generate_market


def fwd(values, mask=None):
    values = np.asarray(values, dtype=np.float64)
    return ReturnPanel(values, np.isfinite(values) if mask is None else mask, 1, "forward")


@pytest.fixture(scope="module")
def returns():
    return np.random.default_rng(0).standard_normal((30, 25))


@pytest.mark.parametrize("method", ["pearson", "spearman"])
def test_self_and_anti_correlation(returns, method):
    r = fwd(returns)
    np.testing.assert_allclose(information_coefficient(factor(returns), r, method).values, 1.0, atol=1e-12)
    np.testing.assert_allclose(information_coefficient(factor(-returns), r, method).values, -1.0, atol=1e-12)


def test_spearman_three_points():
    ic = information_coefficient(factor([[1.0, 2.0, 3.0]]), fwd([[1.0, 3.0, 2.0]]), "spearman")
    assert ic.values[0] == pytest.approx(0.5)


def test_missing_dates_are_nan_not_zero():
    f = factor([[1.0, 2.0, np.nan], [1.0, 1.0, 1.0], [1.0, 2.0, 3.0]])
    ic = information_coefficient(f, fwd([[1.0, 2.0, 3.0]] * 3), "pearson")
    assert np.isnan(ic.values[0]) and np.isnan(ic.values[1])
    assert ic.flagged.tolist() == [False, True, False]
    assert ic.values[2] == pytest.approx(1.0)


def test_ic_requires_forward_alignment(returns):
    with pytest.raises(ConfigError):
        information_coefficient(factor(returns), ReturnPanel(returns, np.ones_like(returns, bool), 1, "trailing"))


def test_information_ratio_examples():
    with pytest.raises(UndefinedMetricError):
        information_ratio([0.1, 0.1, 0.1])
    assert information_ratio([0.2, 0.0]) == pytest.approx(0.1 / np.std([0.2, 0.0], ddof=1))
    assert information_ratio([0.2, 0.0]) == pytest.approx(0.7071, abs=1e-4)
    assert information_ratio([0.2, np.nan, 0.0]) == pytest.approx(0.70710678)
    with pytest.raises(UndefinedMetricError):
        information_ratio([0.3])


def test_decay_peaks_at_planted_horizon():
    p, f = generate_market(100, 300, signal=PlantedSignalSpec(0.3, 5, 1), seed=1)
    prof = ic_decay(f, p, (1, 5, 10, 20))
    assert max(prof, key=prof.get) == 5


def test_decay_null_band():
    p, _ = generate_market(100, 300, seed=2)
    noise = factor(np.random.default_rng(9).standard_normal(p.shape))
    prof = ic_decay(noise, p, (1, 5, 10, 20))
    for h, v in prof.items():
        assert abs(v) < 2 / np.sqrt(100 * (300 - h))


def test_decay_self_at_h1():
    p, _ = generate_market(30, 50, seed=3)
    r1 = forward_returns(p, 1)
    prof = ic_decay(factor(r1.returns, r1.mask), p, (1, 5))
    assert prof[1] == pytest.approx(1.0)


def _report(mean, ir, pos):
    return FactorReport("x", np.array([]), mean, 0.0, ir, pos)


def test_quality_filter_table_examples():
    th = dict(min_abs_mean_ic=0.02, min_ir=0.3, min_positive_rate=0.55)
    neutralized = FactorReport("neutralized", np.array([]), 0.041, 0.089, 0.461, 0.678)
    raw = FactorReport("raw", np.array([]), 0.023, 0.156, 0.147, 0.542)
    assert quality_filter([neutralized, raw], **th) == ["neutralized"]
    assert quality_filter([raw, neutralized]) == ["raw", "neutralized"]


def test_quality_filter_two_sided():
    neg = FactorReport("neg", np.array([]), -0.05, 0.1, -0.5, 0.2)
    assert quality_filter([neg], 0.02, 0.3, 0.55) == ["neg"]


def test_rolling_mean_skips_missing():
    v = np.array([0.1, np.nan, 0.3, 0.5])
    out = rolling_ic_mean(v, 2)
    assert np.isnan(out[:2]).all()
    assert out[2] == pytest.approx(0.2) and out[3] == pytest.approx(0.4)


def test_evaluate_factor_and_csv(tmp_path):
    p, f = generate_market(40, 120, signal=PlantedSignalSpec(0.5, 1, 0), seed=0)
    rep = evaluate_factor(f, p, horizon=1)
    assert rep.n_dates_used == 119
    assert rep.ir == pytest.approx(rep.mean_ic / rep.ic_std)
    assert set(rep.decay_profile) == {1, 5, 10, 20}
    write_reports_csv([rep], tmp_path / "r.csv")
    head, row = (tmp_path / "r.csv").read_text().splitlines()
    assert head == "factor,mean_ic,ic_std,ir,positive_ic_rate,n_dates"
    assert row.startswith("planted,") and row.endswith(",119")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["exp", "cube", "affine"]))
def test_spearman_monotone_invariance(seed, kind):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 12))
    r = fwd(rng.standard_normal((6, 12)))
    g = {"exp": np.exp, "cube": lambda v: v**3, "affine": lambda v: 3 * v + 7}[kind]
    a = information_coefficient(factor(x), r, "spearman").values
    b = information_coefficient(factor(g(x)), r, "spearman").values
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["pearson", "spearman"]))
def test_negation_and_bounds(seed, method):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((8, 10))
    r = fwd(rng.standard_normal((8, 10)) + 0.3 * x)
    a = information_coefficient(factor(x), r, method).values
    b = information_coefficient(factor(-x), r, method).values
    assert np.all(np.abs(a) <= 1.0)
    np.testing.assert_allclose(b, -a, atol=1e-12)
    ra, rb = summarize_ic("a", a), summarize_ic("b", b)
    assert ra.positive_ic_rate == pytest.approx(1 - rb.positive_ic_rate)
    assert ra.ir == pytest.approx(-rb.ir)
    assert np.sign(ra.ir) == np.sign(ra.mean_ic)
