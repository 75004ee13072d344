"""Information coefficient, information ratio, IC decay and the factor quality filter."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, UndefinedMetricError
from .factors import FactorPanel
from .kernels import cross_rank
from .panel import PricePanel, ReturnPanel, forward_returns

logger = logging.getLogger(__name__)

DECAY_HORIZONS = (1, 5, 10, 20)
MIN_NAMES = 3


@dataclass
class ICSeries:
    """Per-date IC with NaN where undefined; ``flagged`` marks zero-variance dates."""

    values: np.ndarray
    n_names: np.ndarray
    flagged: np.ndarray

    @property
    def valid(self):
        return np.isfinite(self.values)


def _masked_corr(x, y, mask):
    """Row-wise Pearson correlation over ``mask`` (two-pass). Returns (corr, n, zero_var)."""
    n = mask.sum(axis=1)
    nn = np.maximum(n, 1)[:, None]
    xm = np.where(mask, x, 0.0).sum(axis=1, keepdims=True) / nn
    ym = np.where(mask, y, 0.0).sum(axis=1, keepdims=True) / nn
    dx = np.where(mask, x - xm, 0.0)
    dy = np.where(mask, y - ym, 0.0)
    sxx = (dx * dx).sum(axis=1)
    syy = (dy * dy).sum(axis=1)
    sxy = (dx * dy).sum(axis=1)
    zero_var = (n >= MIN_NAMES) & ((sxx <= 0) | (syy <= 0))
    ok = (n >= MIN_NAMES) & ~zero_var
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(ok, sxy / np.sqrt(sxx * syy), np.nan)
    corr = np.clip(corr, -1.0, 1.0)
    return corr, n, zero_var


def information_coefficient(f: FactorPanel, r: ReturnPanel, method: str = "spearman") -> ICSeries:
    """Per-date cross-sectional correlation between factor values and forward returns.

    Only securities valid in both panels count; dates with fewer than three
    of them, or with zero dispersion on either side, get NaN. ``spearman``
    is Pearson correlation of :func:`cross_rank` ranks taken over that joint
    subset.
    """
    if method not in ("pearson", "spearman"):
        raise ConfigError(f"unknown IC method {method!r}")
    if f.shape != r.returns.shape:
        raise ConfigError("factor and return panels are not aligned")
    if r.alignment != "forward":
        raise ConfigError("IC needs forward-aligned returns")
    joint = f.mask & r.mask
    x, y = f.values, r.returns
    if method == "spearman":
        x, _ = cross_rank(x, joint)
        y, _ = cross_rank(y, joint)
    corr, n, zero_var = _masked_corr(x, y, joint)
    if zero_var.any():
        logger.debug("%s: %d dates with zero cross-sectional variance", f.name, int(zero_var.sum()))
    return ICSeries(corr, n, zero_var)


def _ic_values(ic):
    v = np.asarray(ic.values if isinstance(ic, ICSeries) else ic, dtype=np.float64)
    return v[np.isfinite(v)]


def information_ratio(ic_series) -> float:
    """Mean IC over its sample standard deviation (``T - 1`` denominator), missing dates excluded.

    Raises
    ------
    UndefinedMetricError
        Fewer than two IC values, or zero dispersion.
    """
    v = _ic_values(ic_series)
    if len(v) < 2:
        raise UndefinedMetricError("information ratio needs at least 2 IC values")
    sd = v.std(ddof=1)
    if sd <= 1e-15 * max(1.0, abs(v.mean())):
        raise UndefinedMetricError("information ratio undefined: IC series has zero dispersion")
    return float(v.mean() / sd)


def ic_decay(f: FactorPanel, panel: PricePanel, horizons=DECAY_HORIZONS, method="spearman"):
    """Mean IC against forward returns at each horizon, as ``{h: mean_ic}``."""
    T = panel.shape[0]
    if max(horizons) >= T:
        raise ConfigError(f"max horizon {max(horizons)} must be < T={T}")
    out = {}
    for h in horizons:
        v = _ic_values(information_coefficient(f, forward_returns(panel, h), method))
        out[int(h)] = float(v.mean()) if len(v) else float("nan")
    return out


def rolling_ic_mean(ic_series, window=60):
    """Trailing mean of the IC series over ``window`` valid dates (NaN until filled)."""
    v = np.asarray(ic_series.values if isinstance(ic_series, ICSeries) else ic_series, dtype=np.float64)
    out = np.full(len(v), np.nan)
    idx = np.flatnonzero(np.isfinite(v))
    for k in range(window - 1, len(idx)):
        out[idx[k]] = v[idx[k - window + 1 : k + 1]].mean()
    return out


@dataclass
class FactorReport:
    name: str
    ic_series: np.ndarray
    mean_ic: float
    ic_std: float
    ir: float
    positive_ic_rate: float
    decay_profile: dict = field(default_factory=dict)
    n_dates_used: int = 0
    rolling_mean_ic: np.ndarray | None = None


def summarize_ic(name, ic, decay_profile=None, rolling_window=None) -> FactorReport:
    v = _ic_values(ic)
    values = ic.values if isinstance(ic, ICSeries) else np.asarray(ic, dtype=np.float64)
    n = len(v)
    mean = float(v.mean()) if n else float("nan")
    sd = float(v.std(ddof=1)) if n >= 2 else float("nan")
    try:
        ir = information_ratio(v)
    except UndefinedMetricError:
        ir = float("nan")
    pos = float((v > 0).mean()) if n else float("nan")
    rolling = rolling_ic_mean(values, rolling_window) if rolling_window else None
    return FactorReport(name, values, mean, sd, ir, pos, dict(decay_profile or {}), n, rolling)


def evaluate_factor(
    f: FactorPanel,
    panel: PricePanel,
    horizon: int = 1,
    method: str = "spearman",
    decay_horizons=DECAY_HORIZONS,
    rolling_window: int | None = 60,
) -> FactorReport:
    """Full IC report for one factor at ``horizon``, plus the decay profile."""
    ic = information_coefficient(f, forward_returns(panel, horizon), method)
    T = panel.shape[0]
    horizons = [h for h in (decay_horizons or ()) if h < T]
    decay = ic_decay(f, panel, horizons, method) if horizons else {}
    return summarize_ic(f.name, ic, decay, rolling_window)


def quality_filter(reports, min_abs_mean_ic=0.0, min_ir=0.0, min_positive_rate=0.0):
    """Names of factors passing all three thresholds, in input order.

    The positive-rate test is two-sided (``max(p, 1 - p)``) so consistently
    negative factors pass as well as positive ones.
    """
    out = []
    for rep in reports:
        ir = rep.ir if np.isfinite(rep.ir) else 0.0
        p = rep.positive_ic_rate
        if not np.isfinite(rep.mean_ic) or not np.isfinite(p):
            continue
        if abs(rep.mean_ic) >= min_abs_mean_ic and abs(ir) >= min_ir and max(p, 1.0 - p) >= min_positive_rate:
            out.append(rep.name)
    return out


def write_reports_csv(reports, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["factor", "mean_ic", "ic_std", "ir", "positive_ic_rate", "n_dates"])
        for r in reports:
            w.writerow([r.name, repr(r.mean_ic), repr(r.ic_std), repr(r.ir), repr(r.positive_ic_rate), r.n_dates_used])
