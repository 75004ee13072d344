"""Multi-stage factor neutralization: industry, size, and principal components.

Each stage fits a per-date cross-sectional regression and removes
``alpha_t`` times the fitted part, so ``alpha_t = 1`` keeps the pure residual
and smaller strengths blend linearly back toward the raw factor::

    out(alpha) = f - alpha * fitted = (1 - alpha) * f + alpha * out(1)
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError
from .factors import FactorPanel, market_return
from .panel import PricePanel, trailing_returns

logger = logging.getLogger(__name__)

STAGES = ("industry", "size", "pca")
HUBER_C = 1.345


@dataclass(frozen=True)
class NeutralizationConfig:
    alpha0: float = 1.0
    beta_vol: float = 0.0
    vol_window_short: int = 20
    vol_window_long: int = 250
    stages: tuple = ("industry", "size")
    pca_k: int = 0
    robust: bool = False

    def __post_init__(self):
        if not (0.0 <= self.alpha0 <= 1.0):
            raise ConfigError("alpha0 must lie in [0, 1]")
        if not (1 < self.vol_window_short < self.vol_window_long):
            raise ConfigError("need 1 < vol_window_short < vol_window_long")
        if self.pca_k < 0:
            raise ConfigError("pca_k must be >= 0")
        stages = tuple(self.stages)
        bad = [s for s in stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown neutralization stage(s): {bad}")
        if len(set(stages)) != len(stages):
            raise ConfigError("stages must not repeat")
        object.__setattr__(self, "stages", stages)


@dataclass
class NeutralizationReport:
    """Per-date coefficients, strengths and flags collected across stages.

    ``records`` rows are ``(date_index, stage, coef_name, value)``.
    """

    records: list = field(default_factory=list)
    strength: np.ndarray | None = None
    flags: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def extend(self, other: "NeutralizationReport"):
        self.records.extend(other.records)
        self.flags.extend(other.flags)
        self.diagnostics.update(other.diagnostics)
        if other.strength is not None:
            self.strength = other.strength
        return self

    def coefficients(self, stage, coef_name):
        """``{date_index: value}`` for one coefficient."""
        return {t: v for t, s, c, v in self.records if s == stage and c == coef_name}

    def write_csv(self, path, dates):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "stage", "coef_name", "value"])
            for t, stage, name, value in self.records:
                w.writerow([str(dates[t]), stage, name, repr(float(value))])


def _as_strength(strength, T):
    if strength is None:
        return np.ones(T)
    a = np.broadcast_to(np.asarray(strength, dtype=np.float64), (T,)).copy()
    if np.any(a < 0) or np.any(a > 1) or not np.all(np.isfinite(a)):
        raise ConfigError("strength must lie in [0, 1]")
    return a


def _huber_lstsq(X, y, c=HUBER_C, max_iter=50, tol=1e-12):
    """Huber M-estimate by iteratively reweighted least squares with MAD scale."""
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    for _ in range(max_iter):
        r = y - X @ beta
        dev = np.abs(r - np.median(r))
        scale = np.median(dev) / 0.6745
        if scale <= 0:
            # over half the residuals tie; mean absolute deviation still sees the outliers
            scale = dev.mean() * np.sqrt(np.pi / 2)
        if scale <= 0:
            break
        u = np.abs(r) / scale
        w = np.where(u <= c, 1.0, c / np.maximum(u, 1e-300))
        sw = np.sqrt(w)
        new = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
        if np.max(np.abs(new - beta)) <= tol * (1.0 + np.max(np.abs(beta))):
            beta = new
            break
        beta = new
    return beta


def industry_neutralize(f: FactorPanel, panel: PricePanel, strength=None, robust=False):
    """Remove industry effects: per date, subtract ``alpha_t`` times the industry fit.

    With least squares the fit on industry dummies is the industry mean, so at
    full strength every industry averages to zero. Industries with no valid
    member on a date are skipped for that date.
    """
    T, N = f.shape
    alpha = _as_strength(strength, T)
    valid = f.mask & panel.mask
    J = panel.n_industries
    dummies = np.zeros((N, J))
    dummies[np.arange(N), panel.industry] = 1.0
    report = NeutralizationReport()
    x = np.where(valid, f.values, 0.0)
    if not robust:
        counts = valid.astype(np.float64) @ dummies
        with np.errstate(invalid="ignore", divide="ignore"):
            coef = (x @ dummies) / counts
    else:
        counts = valid.astype(np.float64) @ dummies
        coef = np.full((T, J), np.nan)
        for t in range(T):
            for j in np.flatnonzero(counts[t] > 0):
                members = valid[t] & (panel.industry == j)
                y = f.values[t, members]
                coef[t, j] = _huber_lstsq(np.ones((len(y), 1)), y)[0]
    fitted = coef[:, panel.industry]
    out = np.where(valid, f.values - alpha[:, None] * fitted, np.nan)
    for t in range(T):
        for j in np.flatnonzero(counts[t] > 0):
            report.records.append((t, "industry", f"industry_{j}", float(coef[t, j])))
    # post-stage diagnostic: largest absolute industry mean of the output
    resid = np.where(valid, out, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = (resid @ dummies) / counts
    report.diagnostics["industry_max_abs_mean"] = float(np.nanmax(np.abs(means))) if np.isfinite(means).any() else 0.0
    report.strength = alpha
    return f.derive(out, valid, step="industry_neutralize"), report


def _size_design(logm):
    mean = logm.mean()
    std = logm.std()
    x = (logm - mean) / std if std > 0 else np.zeros_like(logm)
    return np.column_stack([np.ones_like(logm), x, x * x]), mean, std


def size_neutralize(f: FactorPanel, panel: PricePanel, strength=None, robust=False, min_names=4, within_industry=False):
    """Remove a quadratic log-market-cap fit (with intercept) per date.

    The regression runs on centered and scaled log caps for conditioning; the
    reported ``gamma`` (linear) and ``delta`` (quadratic) coefficients are
    converted back to raw ``log(mcap)`` units. Degenerate designs (e.g. equal
    caps) fall back to the minimum-norm least-squares solution, which reduces
    to demeaning. Dates with fewer than ``min_names`` valid securities are
    left unchanged and flagged.

    With ``within_industry`` the single intercept is replaced by industry
    dummies, so the fit is the joint regression on industries and size. Run
    after industry neutralization this keeps industry means at zero while
    removing size, instead of trading one exposure for the other. Per-industry
    intercepts are then recorded as ``industry_<code>``.
    """
    T, N = f.shape
    alpha = _as_strength(strength, T)
    valid = f.mask & panel.mask
    out = np.where(valid, f.values, np.nan)
    report = NeutralizationReport()
    max_corr = 0.0
    for t in range(T):
        idx = np.flatnonzero(valid[t])
        if len(idx) < min_names:
            if len(idx):
                report.flags.append((t, "size", f"only {len(idx)} valid names; stage skipped"))
                report.records.append((t, "size", "skipped", float(len(idx))))
            continue
        logm = np.log(panel.market_cap[t, idx])
        X, a, b = _size_design(logm)
        if within_industry:
            codes, inv = np.unique(panel.industry[idx], return_inverse=True)
            X = np.column_stack([np.eye(len(codes))[inv], X[:, 1:]])
            labels = [f"industry_{c}" for c in codes]
        else:
            labels = ["intercept"]
        y = f.values[t, idx]
        c = _huber_lstsq(X, y) if robust else np.linalg.lstsq(X, y, rcond=None)[0]
        fitted = X @ c
        out[t, idx] = y - alpha[t] * fitted
        c1, c2 = c[-2], c[-1]
        if b > 0:
            delta = c2 / b**2
            gamma = c1 / b - 2.0 * a * c2 / b**2
            shift = -c1 * a / b + c2 * a * a / b**2
        else:
            delta, gamma, shift = 0.0, 0.0, 0.0
        for name, ci in zip(labels, c[: len(labels)]):
            report.records.append((t, "size", name, float(ci + shift)))
        report.records.append((t, "size", "gamma", float(gamma)))
        report.records.append((t, "size", "delta", float(delta)))
    report.strength = alpha
    return f.derive(out, valid, step="size_neutralize"), report


def strength_from_vols(alpha0, beta_vol, sigma_short, sigma_long):
    """``alpha0 * (1 + beta_vol * (sigma_short - sigma_long) / sigma_long)`` clamped to [0, 1]."""
    raw = alpha0 * (1.0 + beta_vol * (sigma_short - sigma_long) / sigma_long)
    return np.clip(raw, 0.0, 1.0)


def adaptive_strength(market_returns, cfg: NeutralizationConfig, report: NeutralizationReport | None = None):
    """Per-date neutralization strength driven by short vs long realized market volatility.

    Dates without a full long window use ``alpha0``; so do dates where the
    long-window volatility is zero (flagged in ``report`` when given).
    """
    rm = np.asarray(market_returns, dtype=np.float64)
    T = len(rm)
    if T <= cfg.vol_window_long:
        raise ConfigError(f"need more than vol_window_long={cfg.vol_window_long} dates, got {T}")
    alpha = np.full(T, cfg.alpha0)
    if cfg.beta_vol == 0:
        return alpha
    col = rm[:, None]
    m = np.isfinite(col)
    s_short, ms = kernels.rolling_std(col, m, cfg.vol_window_short)
    s_long, ml = kernels.rolling_std(col, m, cfg.vol_window_long)
    ok = (ms & ml)[:, 0]
    s_short, s_long = s_short[:, 0], s_long[:, 0]
    zero = ok & (s_long <= 0)
    if report is not None:
        for t in np.flatnonzero(zero):
            report.flags.append((int(t), "strength", "zero long-window volatility; using alpha0"))
    use = ok & ~zero
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha[use] = strength_from_vols(cfg.alpha0, cfg.beta_vol, s_short[use], s_long[use])
    return alpha


def _pooled_stats(factors, window):
    joint = np.logical_and.reduce([f.mask for f in factors])
    rows = np.zeros(joint.shape[0], dtype=bool)
    rows[window] = True
    use = joint & rows[:, None]
    data = np.stack([f.values[use] for f in factors], axis=1)  # (obs, F)
    return joint, data


def pca_neutralize(factors, k: int, window=slice(None)):
    """Project out the top-``k`` principal directions of the factor correlation matrix.

    Each factor is standardized with pooled mean and std over ``window``; at
    every (date, security) the vector of standardized factor values is
    projected onto the orthogonal complement of the leading ``k``
    eigenvectors, then mapped back to each factor's units (``mean + std *
    residual``). Cells are valid where every factor is valid.
    """
    factors = list(factors)
    F = len(factors)
    if k < 0:
        raise ConfigError("k must be >= 0")
    if k == 0:
        return factors
    if k >= F:
        raise ConfigError(f"k={k} must be smaller than the number of factors ({F})")
    joint, data = _pooled_stats(factors, window)
    if len(data) < 2:
        raise ConfigError("not enough joint observations in the estimation window")
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    if np.any(std <= 0):
        raise ConfigError("a factor is constant over the estimation window")
    corr = np.corrcoef(data, rowvar=False)
    evals, evecs = np.linalg.eigh(corr)
    top = evecs[:, np.argsort(evals)[::-1][:k]]  # (F, k)
    stacked = np.stack([f.values for f in factors], axis=-1)  # (T, N, F)
    z = (stacked - mean) / std
    resid = z - (z @ top) @ top.T
    out = mean + std * resid
    return [
        f.derive(np.where(joint, out[..., i], np.nan), joint, step=f"pca_neutralize(k={k})")
        for i, f in enumerate(factors)
    ]


def panel_market_returns(panel: PricePanel):
    daily = trailing_returns(panel, 1)
    return market_return(daily.returns, daily.mask)


def neutralize_factors(factors, panel: PricePanel, cfg: NeutralizationConfig, market_returns=None):
    """Run the configured stages in order over a factor universe.

    ``industry`` and ``size`` act on each factor separately; ``pca`` acts
    across the whole list. A ``size`` stage that follows ``industry`` uses
    industry dummies in place of its intercept, so at full strength the output
    is both industry- and size-neutral. Returns the neutralized factors and a
    merged report.
    """
    factors = list(factors)
    T = panel.shape[0]
    report = NeutralizationReport()
    if cfg.beta_vol != 0:
        rm = panel_market_returns(panel) if market_returns is None else market_returns
        alpha = adaptive_strength(rm, cfg, report)
    else:
        alpha = np.full(T, cfg.alpha0)
    report.strength = alpha
    for t in range(T):
        report.records.append((t, "strength", "alpha", float(alpha[t])))
    for stage in cfg.stages:
        if stage == "pca":
            factors = pca_neutralize(factors, cfg.pca_k)
            continue
        if stage == "industry":
            fn = industry_neutralize
        else:
            fn = partial(size_neutralize, within_industry="industry" in cfg.stages[: cfg.stages.index(stage)])
        updated = []
        for f in factors:
            g, rep = fn(f, panel, alpha, robust=cfg.robust)
            rep.records = [(t, f"{f.name}:{s}", c, v) for t, s, c, v in rep.records]
            report.extend(rep)
            report.strength = alpha
            updated.append(g)
        factors = updated
    return factors, report
