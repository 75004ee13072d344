import numpy as np
import pytest

from conftest import factor
from crossalpha.backtest import (
    BacktestConfig,
    attribution_report,
    compute_metrics,
    max_drawdown,
    run_backtest,
    sharpe_ratio,
    write_bundle,
)
from crossalpha.config import CombinerSection, OptimizerSection, RiskSection, RunConfig
from crossalpha.errors import ConfigError, UndefinedMetricError
from crossalpha.factors import FactorPanel
from crossalpha.panel import trailing_returns
from crossalpha.synth import PlantedSignalSpec, generate_market


def make_cfg(**kw):
    base = dict(
        train_end=199,
        test_end=380,
        rebalance_every=20,
        retrain_every=60,
        combiner=CombinerSection(ridge_lambda=1.0, horizon=20),
        optimizer=OptimizerSection(w_max=0.05, gamma_tc=1.0),
        risk=RiskSection(window=120),
    )
    base.update(kw)
    return BacktestConfig(**base)


def market(seed=0, strength=0.3, n=60, days=400):
    p, planted = generate_market(n, days, signal=PlantedSignalSpec(strength, 20, seed), seed=seed)
    noise = factor(np.random.default_rng(seed + 1000).standard_normal(p.shape), p.mask, name="noise")
    return p, [planted, noise]


@pytest.fixture(scope="module")
def run():
    p, fs = market()
    return p, fs, run_backtest(p, fs, make_cfg(cost_rate=0.001))


# ------------------------------------------------------------------ metrics


def test_metric_examples():
    assert max_drawdown([1, 1.2, 0.9, 1.1]) == pytest.approx(0.25)
    eq = 1.01 ** np.arange(13)
    m = compute_metrics(eq, periods_per_year=12)
    assert m["annualized_return"] == pytest.approx(1.01**12 - 1, rel=1e-12)
    assert np.isnan(m["sharpe"]) and np.isnan(m["calmar"])
    with pytest.raises(UndefinedMetricError):
        sharpe_ratio(eq, 12)
    # 252 daily returns, i.e. 253 equity points
    doubling = 2.0 ** (np.arange(253) / 252)
    assert abs(compute_metrics(doubling)["annualized_return"] - 1.0) <= 1e-12
    with pytest.raises(UndefinedMetricError):
        compute_metrics([1.0])


def test_metrics_recomputable(run):
    _, _, res = run
    again = compute_metrics(res.equity_curve)
    for k, v in again.items():
        assert res.metrics[k] == v
    r = res.period_returns
    assert res.metrics["sharpe"] == pytest.approx(r.mean() / r.std(ddof=1) * np.sqrt(252))


# ------------------------------------------------------------------ loop


def test_schedule_and_shapes(run):
    p, _, res = run
    assert res.rebalance_index[0] == 199 + 20 + 1
    assert np.all(np.diff(res.rebalance_index) == 20)
    assert len(res.equity_curve) == 380 - 220 + 1
    assert res.equity_curve[0] == 1.0 and np.all(res.equity_curve > 0)
    assert all(s == "optimal" for s in res.solver_status)


def test_accounting_identity(run):
    p, _, res = run
    daily = trailing_returns(p, 1)
    first = res.rebalance_index[0]
    eq = res.equity_curve
    for k, tau in enumerate(res.rebalance_index):
        w = res.weights_history[k]
        end = min(tau + 20, 380)
        for d in range(tau + 1, end + 1):
            i = d - first
            cost = 0.001 * res.turnover_history[k] * eq[tau - first] if d == tau + 1 else 0.0
            expect = eq[i - 1] * (1 + np.dot(w, np.where(daily.mask[d], daily.returns[d], 0.0))) - cost
            assert abs(eq[i] - expect) <= 1e-12


def test_market_neutral_book(run):
    _, _, res = run
    assert np.abs(res.weights_history.sum(axis=1)).max() <= 1e-8
    assert np.abs(res.weights_history).max() <= 0.05 + 1e-8


def test_deterministic(run):
    p, fs, res = run
    again = run_backtest(p, fs, make_cfg(cost_rate=0.001))
    np.testing.assert_array_equal(res.equity_curve, again.equity_curve)
    np.testing.assert_array_equal(res.weights_history, again.weights_history)
    assert res.metrics == again.metrics or all(
        (a == b) or (np.isnan(a) and np.isnan(b)) for a, b in zip(res.metrics.values(), again.metrics.values()))


def test_cost_doubling(run):
    p, fs, res = run
    dbl = run_backtest(p, fs, make_cfg(cost_rate=0.002))
    np.testing.assert_array_equal(dbl.turnover_history, res.turnover_history)
    assert dbl.equity_curve[-1] < res.equity_curve[-1]
    free = run_backtest(p, fs, make_cfg(cost_rate=0.0))
    assert free.equity_curve[-1] > res.equity_curve[-1]


@pytest.mark.parametrize("seed,cut,kw", [
    (0, 300, {}),
    (1, 331, {"retrain_every": 20}),
    (2, 279, {"purge_gap": 25, "rebalance_every": 10}),
])
def test_truncation_reproduces_past_decisions(seed, cut, kw):
    p, fs = market(seed)
    full = run_backtest(p, fs, make_cfg(**kw))
    short_panel = p.select(rows=slice(0, cut + 1))
    short_fs = [FactorPanel(f.name, f.values[: cut + 1], f.mask[: cut + 1]) for f in fs]
    short = run_backtest(short_panel, short_fs, make_cfg(test_end=cut, **kw))
    purge = kw.get("purge_gap", 20)
    keep = short.rebalance_index <= cut - purge
    assert keep.sum() >= 2
    n = int(keep.sum())
    np.testing.assert_array_equal(short.rebalance_index[:n], full.rebalance_index[:n])
    np.testing.assert_array_equal(short.weights_history[:n], full.weights_history[:n])
    for a, b in zip(short.combiner_weights[:n], full.combiner_weights[:n]):
        np.testing.assert_array_equal(a, b)
    m = len(short.equity_curve)
    np.testing.assert_array_equal(short.equity_curve, full.equity_curve[:m])


def test_planted_signal_profitable(run):
    assert run[2].metrics["sharpe"] > 1.0


def test_tiny_universe_stays_flat():
    p, fs = market(n=2, days=300)
    res = run_backtest(p, fs, make_cfg(test_end=290, optimizer=OptimizerSection(w_max=0.5)))
    assert set(res.solver_status) == {"skipped"}
    assert np.all(res.equity_curve == 1.0)
    assert np.isnan(res.metrics["sharpe"])


def test_delisting_liquidates_with_cost():
    p, fs = market(3)
    res0 = run_backtest(p, fs, make_cfg(cost_rate=0.001))
    k = 2
    tau = res0.rebalance_index[k]
    j = int(np.argmax(np.abs(res0.weights_history[k])))
    mask = p.mask.copy()
    mask[tau + 5:, j] = False
    res = run_backtest(p.with_mask(mask), fs, make_cfg(cost_rate=0.001))
    hit = [msg for d, msg in res.flags if d == tau + 5]
    assert hit and "delisted" in hit[0]
    assert res.turnover_history[k] > res0.turnover_history[k]
    assert np.all(res.weights_history[k + 1:, j] == 0.0)
    assert np.all(res.equity_curve > 0)


def test_config_errors():
    p, fs = market(0, days=300)
    with pytest.raises(ConfigError):
        run_backtest(p, fs, make_cfg(train_end=270, test_end=290))
    with pytest.raises(ConfigError):
        run_backtest(p, fs, make_cfg(rebalance_every=0))
    with pytest.raises(ConfigError):
        run_backtest(p, [], make_cfg())
    with pytest.raises(ConfigError):
        run_backtest(p, fs, make_cfg(risk=RiskSection(factors=["nope"])))


def test_date_strings_accepted():
    p, fs = market(0, days=300)
    a = run_backtest(p, fs, make_cfg(train_end=199, test_end=280))
    b = run_backtest(p, fs, make_cfg(train_end=str(p.dates[199]), test_end=str(p.dates[280])))
    np.testing.assert_array_equal(a.equity_curve, b.equity_curve)


# ------------------------------------------------------------------ attribution


def test_attribution_identity(run):
    _, fs, res = run
    rep = attribution_report(res, fs)
    assert sum(rep.totals.values()) == pytest.approx(rep.total_pnl, abs=1e-8)
    first = res.rebalance_index[0]
    for k, tau in enumerate(res.rebalance_index):
        end = res.rebalance_index[k + 1] if k + 1 < len(res.rebalance_index) else first + len(res.equity_curve) - 1
        got = sum(v for t, _, v in rep.rows if t == tau)
        assert abs(got - (res.equity_curve[end - first] - res.equity_curve[tau - first])) <= 1e-8
    assert rep.systematic == pytest.approx(rep.totals["planted"] + rep.totals["noise"])


def test_attribution_single_factor():
    p, fs = market(4)
    res = run_backtest(p, fs[:1], make_cfg())
    rep = attribution_report(res, fs[:1])
    assert rep.systematic == rep.totals["planted"]
    assert set(rep.totals) == {"planted", "market", "residual", "costs"}
    assert sum(rep.totals.values()) == pytest.approx(rep.total_pnl, abs=1e-8)
    assert rep.totals["planted"] > 0


def test_attribution_zero_weight_factor():
    p, fs = market(5)
    const = factor(np.ones(p.shape), p.mask, name="const")
    res = run_backtest(p, [fs[0], const], make_cfg())
    assert all(w[1] == 0.0 for w in res.combiner_weights)
    rep = attribution_report(res, [fs[0], const])
    assert rep.totals["const"] == 0.0
    assert sum(rep.totals.values()) == pytest.approx(rep.total_pnl, abs=1e-8)


# ------------------------------------------------------------------ bundle


def test_bundle(tmp_path, run):
    _, fs, res = run
    rep = attribution_report(res, fs)
    write_bundle(res, tmp_path / "a", RunConfig(), seed=7, attribution=rep)
    write_bundle(res, tmp_path / "b", RunConfig(), seed=7, attribution=rep)
    names = {"equity.csv", "weights.csv", "metrics.csv", "attribution.csv", "manifest.txt", "last_problem"}
    assert names <= {f.name for f in (tmp_path / "a").iterdir()}
    for n in ("equity.csv", "weights.csv", "metrics.csv", "attribution.csv", "manifest.txt"):
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    assert (tmp_path / "a" / "equity.csv").read_text().splitlines()[0] == "date,value"
    assert (tmp_path / "a" / "weights.csv").read_text().splitlines()[0] == "date,security_id,weight"
    metrics = dict(line.split(",") for line in (tmp_path / "a" / "metrics.csv").read_text().splitlines()[1:])
    assert float(metrics["sharpe"]) == res.metrics["sharpe"]
    manifest = (tmp_path / "a" / "manifest.txt").read_text()
    assert "seed=7" in manifest and f"config_sha256={RunConfig().digest()}" in manifest
