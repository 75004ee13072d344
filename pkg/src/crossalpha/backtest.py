"""Walk-forward backtest: purged expanding-window retraining, optimized rebalances, cost accounting.

Timeline at a rebalance date ``tau`` (all indices are trading days):

* the combiner trains on label dates ``s`` with ``s + purge_gap < tau``, so
  with ``purge_gap >= horizon`` every training label is realized before ``tau``;
* the risk model uses daily returns up to and including ``tau``;
* the portfolio is chosen from factor values at ``tau`` and held at constant
  weights for ``rebalance_every`` days; the trade cost
  ``cost_rate * turnover * equity`` is charged at ``tau``.

Equity follows ``E[d] = E[d-1] * (1 + w . r[d]) - cost[d-1]`` with ``cost``
nonzero only on trade dates.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .combiner import fit as fit_combiner
from .combiner import predict as combiner_predict
from .config import BacktestSection, CombinerSection, OptimizerSection, RiskSection, RunConfig
from .errors import ConfigError, UndefinedMetricError
from .factors import FactorPanel
from .optimizer import OPTIMAL, PortfolioProblem, map_weights, solve
from .panel import PricePanel, forward_returns, trailing_returns
from .risk import RiskModel, ewma_cov, factor_returns, idio_variance, standardize_rows

logger = logging.getLogger(__name__)

MIN_UNIVERSE = 3


@dataclass
class BacktestConfig:
    """Walk-forward settings plus the combiner, risk and optimizer blocks.

    Dates are row indices or ``YYYY-MM-DD`` strings; negative indices select
    the defaults (``train_end`` at 62.5% of the sample, ``test_end`` at the
    last date). ``purge_gap=None`` uses the combiner horizon and
    ``train_window=None`` an expanding window.
    """

    train_start: object = 0
    train_end: object = -1
    test_end: object = -1
    retrain_every: int = 60
    rebalance_every: int = 20
    purge_gap: int | None = None
    cost_rate: float = 0.0
    train_window: int | None = None
    periods_per_year: int = 252
    risk_free: float = 0.0
    combiner: CombinerSection = field(default_factory=CombinerSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    risk: RiskSection = field(default_factory=RiskSection)

    @classmethod
    def from_run_config(cls, run: RunConfig) -> "BacktestConfig":
        b: BacktestSection = run.backtest
        return cls(
            train_start=b.train_start,
            train_end=b.train_end,
            test_end=b.test_end,
            retrain_every=b.retrain_every,
            rebalance_every=b.rebalance_every,
            purge_gap=None if b.purge_gap < 0 else b.purge_gap,
            cost_rate=b.cost_rate,
            train_window=b.train_window or None,
            periods_per_year=b.periods_per_year,
            risk_free=b.risk_free,
            combiner=run.combiner,
            optimizer=run.optimizer,
            risk=run.risk,
        )


def _date_index(panel: PricePanel, value, default: int, side: str) -> int:
    if isinstance(value, str):
        d = np.datetime64(value, "D")
        if side == "left":
            return int(np.searchsorted(panel.dates, d, side="left"))
        return int(np.searchsorted(panel.dates, d, side="right")) - 1
    value = int(value)
    return default if value < 0 else value


@dataclass
class BacktestResult:
    dates: np.ndarray
    equity_curve: np.ndarray
    period_returns: np.ndarray
    rebalance_index: np.ndarray
    weights_history: np.ndarray  # (n_rebalances, N), zeros outside the universe
    universe_history: np.ndarray  # (n_rebalances, N) bool
    turnover_history: np.ndarray
    cost_history: np.ndarray
    metrics: dict
    flags: list
    combiner_weights: list
    solver_status: list
    solver_iterations: list
    securities: tuple
    factor_names: tuple
    panel: PricePanel | None = field(default=None, repr=False)
    last_problem: PortfolioProblem | None = field(default=None, repr=False)


def run_backtest(panel: PricePanel, factors, cfg: BacktestConfig | None = None) -> BacktestResult:
    """Simulate the walk-forward strategy over precomputed, neutralized factors."""
    cfg = cfg or BacktestConfig()
    factors = list(factors)
    if not factors:
        raise ConfigError("need at least one factor")
    T, N = panel.shape
    for f in factors:
        if f.shape != (T, N):
            raise ConfigError(f"factor {f.name!r} is not aligned with the panel")
    h = cfg.combiner.horizon
    purge = h if cfg.purge_gap is None else int(cfg.purge_gap)
    H = int(cfg.rebalance_every)
    if H < 1 or cfg.retrain_every < 1:
        raise ConfigError("rebalance_every and retrain_every must be >= 1")
    if purge < 0:
        raise ConfigError("purge_gap must be >= 0")
    train_start = _date_index(panel, cfg.train_start, 0, "left")
    train_end = _date_index(panel, cfg.train_end, int(0.625 * T), "right")
    test_end = min(_date_index(panel, cfg.test_end, T - 1, "right"), T - 1)
    first = train_end + purge + 1
    if not (0 <= train_start <= train_end):
        raise ConfigError("need 0 <= train_start <= train_end")
    if first >= test_end:
        raise ConfigError(
            f"no test period: first rebalance {first} (train_end {train_end} + purge {purge} + 1) "
            f"is not before test_end {test_end}"
        )
    opt = cfg.optimizer
    rc = cfg.risk

    daily = trailing_returns(panel, 1)
    fwd = forward_returns(panel, h)
    X_all = np.stack([f.values for f in factors], axis=-1)
    fmask = np.logical_and.reduce([f.mask for f in factors])

    names = [f.name for f in factors]
    risk_names = list(rc.factors) or names
    unknown = [n for n in risk_names if n not in names]
    if unknown:
        raise ConfigError(f"unknown risk factors {unknown}")
    risk_idx = [names.index(n) for n in risk_names]
    lagged = []
    for k in risk_idx:
        vals = np.full((T, N), np.nan)
        msk = np.zeros((T, N), dtype=bool)
        vals[1:] = factors[k].values[:-1]
        msk[1:] = factors[k].mask[:-1]
        lagged.append(FactorPanel(names[k], vals, msk))
    fr = factor_returns(lagged, daily)

    rebal = np.arange(first, test_end, H)
    n_reb = len(rebal)
    w_prev = np.zeros(N)
    equity = [1.0]
    eq_dates = [first]
    weights_hist = np.zeros((n_reb, N))
    universe_hist = np.zeros((n_reb, N), dtype=bool)
    turnover = np.zeros(n_reb)
    costs = np.zeros(n_reb)
    flags = []
    comb_weights = []
    statuses, iters = [], []
    model = None
    last_train = None
    prev_sol = None
    prev_ids = None
    problem = None

    for k, tau in enumerate(rebal):
        # 1. retrain
        if model is None or tau - last_train >= cfg.retrain_every:
            stop = tau - purge
            start = train_start if cfg.train_window is None else max(train_start, stop - cfg.train_window)
            model = fit_combiner(factors, fwd, (start, stop), cfg.combiner.ridge_lambda)
            last_train = tau
        comb_weights.append(model.weights.copy())
        # 2. forecast
        mu_all = combiner_predict(model, factors, tau)
        U = fmask[tau] & panel.mask[tau] & np.isfinite(mu_all)
        idx = np.flatnonzero(U)
        universe_hist[k] = U
        w_new = np.zeros(N)
        if len(idx) < MIN_UNIVERSE:
            flags.append((int(tau), f"only {len(idx)} names with forecasts; holding no positions"))
            statuses.append("skipped")
            iters.append(0)
        else:
            # 3. risk model
            lo = max(1, tau - rc.window + 1)
            Fr = fr.values[lo : tau + 1]
            if np.all(~np.isfinite(Fr).all(axis=1)):
                raise ConfigError(f"no factor returns available before rebalance {tau}")
            omega = ewma_cov(Fr, rc.decay)
            iflags = []
            idio = idio_variance(fr.residuals[lo : tau + 1][:, idx], np.zeros((tau + 1 - lo, len(idx))), rc.idio_floor, flags=iflags)
            if iflags:
                flags.append((int(tau), f"{len(iflags)} securities with < 2 residuals; idiosyncratic variance floored"))
            B = np.stack([standardize_rows(X_all[tau, idx, j][None, :], np.ones((1, len(idx)), bool))[0] for j in risk_idx], axis=1)
            risk = RiskModel(B, omega, idio, rc.epsilon).scaled(float(H))
            # 4. optimize
            exiting = (w_prev != 0) & ~U
            if exiting.any():
                flags.append((int(tau), f"liquidated {int(exiting.sum())} names leaving the universe"))
            ids = tuple(panel.securities[i] for i in idx)
            problem = PortfolioProblem(
                mu_hat=mu_all[idx],
                risk=risk,
                lambda_risk=opt.lambda_risk,
                gamma_tc=opt.gamma_tc,
                costs=opt.cost,
                prev_weights=w_prev[idx],
                w_max=opt.w_max,
                leverage=opt.leverage,
                sectors=panel.industry[idx] if opt.sector_neutral else None,
                securities=ids,
            )
            warm = None
            if opt.warm_start == "previous" and prev_sol is not None:
                warm = prev_sol if ids == prev_ids else map_weights(prev_ids, prev_sol.weights, ids)
            sol = solve(problem, warm_start=warm, tol=opt.tol, max_iter=opt.max_iter)
            statuses.append(sol.status)
            iters.append(sol.iterations)
            if sol.status == OPTIMAL:
                w_new[idx] = sol.weights
                prev_sol, prev_ids = sol, ids
            else:
                flags.append((int(tau), f"optimizer status {sol.status}; holding previous weights"))
                w_new[idx] = w_prev[idx]
        # 5-6. trade, charge costs, hold
        turnover[k] = np.abs(w_new - w_prev).sum()
        costs[k] = cfg.cost_rate * turnover[k] * equity[-1]
        weights_hist[k] = w_new
        w = w_new.copy()
        pending_cost = costs[k]
        end = min(tau + H, test_end)
        for d in range(tau + 1, end + 1):
            r = daily.returns[d]
            ok = daily.mask[d]
            gone = (w != 0) & ~ok
            liq_cost = 0.0
            if gone.any():
                liq_cost = cfg.cost_rate * np.abs(w[gone]).sum() * equity[-1]
                flags.append((int(d), f"delisted mid-hold: liquidated {int(gone.sum())} names"))
                turnover[k] += np.abs(w[gone]).sum()
                costs[k] += liq_cost
                w[gone] = 0.0
            held = w != 0
            gross = float(np.dot(w[held], r[held]))
            equity.append(equity[-1] * (1.0 + gross) - pending_cost - liq_cost)
            eq_dates.append(d)
            pending_cost = 0.0
            if equity[-1] <= 0:
                raise UndefinedMetricError(f"equity became non-positive on day {d}")
        w_prev = w

    equity = np.asarray(equity)
    period_returns = equity[1:] / equity[:-1] - 1.0
    metrics = compute_metrics(equity, cfg.periods_per_year, risk_free=cfg.risk_free)
    metrics["mean_turnover"] = float(turnover.mean()) if n_reb else float("nan")
    return BacktestResult(
        dates=panel.dates[np.asarray(eq_dates)],
        equity_curve=equity,
        period_returns=period_returns,
        rebalance_index=rebal,
        weights_history=weights_hist,
        universe_history=universe_hist,
        turnover_history=turnover,
        cost_history=costs,
        metrics=metrics,
        flags=flags,
        combiner_weights=comb_weights,
        solver_status=statuses,
        solver_iterations=iters,
        securities=panel.securities,
        factor_names=tuple(names),
        panel=panel,
        last_problem=problem,
    )


# ---------------------------------------------------------------- metrics


def _period_returns(equity):
    e = np.asarray(equity, dtype=np.float64)
    if e.ndim != 1 or len(e) < 2:
        raise UndefinedMetricError("need at least 2 equity points")
    if np.any(e <= 0):
        raise UndefinedMetricError("equity must be strictly positive")
    return e[1:] / e[:-1] - 1.0


def _is_zero_std(x):
    sd = x.std(ddof=1) if len(x) > 1 else 0.0
    return sd <= 1e-12 * max(1.0, float(np.abs(x).mean())) or not np.isfinite(sd)


def annualized_return(equity, periods_per_year=252):
    e = np.asarray(equity, dtype=np.float64)
    _period_returns(e)
    return float((e[-1] / e[0]) ** (periods_per_year / (len(e) - 1)) - 1.0)


def sharpe_ratio(equity, periods_per_year=252, risk_free=0.0):
    """Annualized mean over sample std (``n - 1``) of period excess returns."""
    r = _period_returns(equity) - risk_free
    if len(r) < 2 or _is_zero_std(r):
        raise UndefinedMetricError("Sharpe ratio undefined: zero return dispersion")
    return float(r.mean() / r.std(ddof=1) * math.sqrt(periods_per_year))


def information_ratio(equity, benchmark_returns=None, periods_per_year=252):
    """Annualized mean active return over tracking error; benchmark defaults to zero."""
    r = _period_returns(equity)
    b = np.zeros_like(r) if benchmark_returns is None else np.asarray(benchmark_returns, dtype=np.float64)
    if b.shape != r.shape:
        raise ConfigError("benchmark returns must match the period returns")
    a = r - b
    if len(a) < 2 or _is_zero_std(a):
        raise UndefinedMetricError("information ratio undefined: zero tracking error")
    return float(a.mean() / a.std(ddof=1) * math.sqrt(periods_per_year))


def max_drawdown(equity):
    e = np.asarray(equity, dtype=np.float64)
    _period_returns(e)
    return float(np.max(1.0 - e / np.maximum.accumulate(e)))


def calmar_ratio(equity, periods_per_year=252):
    mdd = max_drawdown(equity)
    if mdd <= 0:
        raise UndefinedMetricError("Calmar ratio undefined: zero drawdown")
    return annualized_return(equity, periods_per_year) / mdd


def compute_metrics(equity_curve, periods_per_year=252, benchmark_returns=None, risk_free=0.0) -> dict:
    """Performance summary of an equity curve.

    Metrics that are undefined for this curve (zero dispersion, zero
    drawdown) are reported as NaN; the individual metric functions raise
    :class:`UndefinedMetricError` instead.
    """
    r = _period_returns(equity_curve)
    out = {
        "annualized_return": annualized_return(equity_curve, periods_per_year),
        "annualized_vol": float(r.std(ddof=1) * math.sqrt(periods_per_year)) if len(r) > 1 else float("nan"),
    }
    for key, fn in (
        ("sharpe", lambda: sharpe_ratio(equity_curve, periods_per_year, risk_free)),
        ("information_ratio", lambda: information_ratio(equity_curve, benchmark_returns, periods_per_year)),
        ("calmar", lambda: calmar_ratio(equity_curve, periods_per_year)),
    ):
        try:
            out[key] = fn()
        except UndefinedMetricError:
            out[key] = float("nan")
    out["max_drawdown"] = max_drawdown(equity_curve)
    return out


# ---------------------------------------------------------------- attribution


@dataclass
class AttributionReport:
    """P&L split per holding period: one row per active factor, plus market, residual and costs.

    ``rows`` are ``(rebalance_date_index, component, pnl)``. Factor rows sum
    to the systematic P&L; all rows together sum to the equity change.
    """

    rows: list
    totals: dict
    total_pnl: float

    @property
    def systematic(self):
        return sum(v for k, v in self.totals.items() if k not in ("market", "residual", "costs"))


def attribution_report(result: BacktestResult, factors) -> AttributionReport:
    """Decompose each day's P&L by a cross-sectional regression on the period's active factors.

    For hold day ``d`` the daily returns are regressed on an intercept and the
    factor exposures at ``d - 1`` (z-scored) of the factors with nonzero
    combiner weight in that period. A factor's contribution is the portfolio's
    exposure times that factor's return, in equity units. The intercept term
    is reported as ``market``; everything the regression leaves unexplained,
    including names outside the regression set, is ``residual``.
    """
    panel = result.panel
    if panel is None:
        raise ConfigError("result carries no panel; cannot attribute")
    factors = list(factors)
    names = [f.name for f in factors]
    daily = trailing_returns(panel, 1)
    equity = result.equity_curve
    first = int(result.rebalance_index[0])
    rows = []
    totals = {n: 0.0 for n in names}
    totals.update(market=0.0, residual=0.0, costs=0.0)
    n_reb = len(result.rebalance_index)
    for k, tau in enumerate(result.rebalance_index):
        tau = int(tau)
        active = [j for j in range(len(factors)) if result.combiner_weights[k][j] != 0]
        end = int(result.rebalance_index[k + 1]) if k + 1 < n_reb else first + len(equity) - 1
        period = {names[j]: 0.0 for j in active}
        period.update(market=0.0, residual=0.0, costs=-float(result.cost_history[k]))
        w = result.weights_history[k].copy()
        for d in range(tau + 1, end + 1):
            e_prev = equity[d - 1 - first]
            ok = daily.mask[d]
            w[(w != 0) & ~ok] = 0.0
            held = w != 0
            pnl = e_prev * float(np.dot(w[held], daily.returns[d][held]))
            joint = ok.copy()
            for j in active:
                joint &= factors[j].mask[d - 1]
            ix = np.flatnonzero(joint)
            explained = 0.0
            if len(ix) >= len(active) + 2:
                Z = [standardize_rows(factors[j].values[d - 1, ix][None, :], np.ones((1, len(ix)), bool))[0] for j in active]
                X = np.column_stack([np.ones(len(ix))] + Z)
                coef = np.linalg.lstsq(X, daily.returns[d, ix], rcond=None)[0]
                wj = w[ix]
                m = e_prev * coef[0] * wj.sum()
                period["market"] += m
                explained += m
                for c, j in enumerate(active):
                    v = e_prev * float(wj @ Z[c]) * coef[c + 1]
                    period[names[j]] += v
                    explained += v
            period["residual"] += pnl - explained
        for comp, v in period.items():
            rows.append((tau, comp, v))
            totals[comp] += v
    return AttributionReport(rows, totals, float(equity[-1] - equity[0]))


# ---------------------------------------------------------------- bundle


def write_bundle(result: BacktestResult, out_dir, run_config: RunConfig | None = None, seed=None, attribution=None, extra=None):
    """Write ``equity.csv``, ``weights.csv``, ``metrics.csv``, ``attribution.csv`` and ``manifest.txt``."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    with (d / "equity.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "value"])
        for date, v in zip(result.dates, result.equity_curve):
            w.writerow([str(date), repr(float(v))])
    with (d / "weights.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "security_id", "weight"])
        for k, tau in enumerate(result.rebalance_index):
            date = str(result.panel.dates[tau]) if result.panel is not None else str(int(tau))
            for j in np.flatnonzero(result.universe_history[k]):
                w.writerow([date, result.securities[j], repr(float(result.weights_history[k, j]))])
    with (d / "metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "value"])
        for key in sorted(result.metrics):
            w.writerow([key, repr(float(result.metrics[key]))])
    if attribution is not None:
        with (d / "attribution.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "component", "pnl"])
            for tau, comp, v in attribution.rows:
                date = str(result.panel.dates[tau]) if result.panel is not None else str(tau)
                w.writerow([date, comp, repr(float(v))])
            for comp, v in attribution.totals.items():
                w.writerow(["total", comp, repr(float(v))])
    if result.last_problem is not None:
        write_problem(result.last_problem, d / "last_problem")
    write_manifest(d / "manifest.txt", run_config, seed, extra)


def write_problem(problem: PortfolioProblem, out_dir):
    """``mu.csv`` plus the risk-model files, the inputs of ``crossalpha optimize``."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    ids = problem.securities or tuple(f"S{j}" for j in range(problem.n))
    with (d / "mu.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["security_id", "mu", "sector", "prev_weight", "cost"])
        sectors = problem.sectors if problem.sectors is not None else np.zeros(problem.n, dtype=int)
        for j, sid in enumerate(ids):
            w.writerow([sid, repr(float(problem.mu_hat[j])), int(sectors[j]),
                        repr(float(problem.prev_weights[j])), repr(float(problem.costs[j]))])
    problem.risk.save(d / "risk", ids)


def write_manifest(path, run_config: RunConfig | None, seed, extra=None):
    """Plain-text replay record; deliberately free of timestamps so reruns are byte-identical."""
    lines = [f"crossalpha_version={__version__}", f"numpy_version={np.__version__}", f"seed={seed}"]
    if run_config is not None:
        lines.append(f"config_sha256={run_config.digest()}")
    for key, value in sorted((extra or {}).items()):
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")
