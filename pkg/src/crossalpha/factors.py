"""Factor panels, the two built-in factors, and factor CSV I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, InvalidWindowError, PanelParseError
from .panel import PricePanel, trailing_returns


@dataclass(frozen=True, eq=False)
class FactorPanel:
    """One T x N factor matrix with its validity mask.

    ``lineage`` lists the kernel applications that produced the values, oldest
    first, so reports can say where a number came from.
    """

    name: str
    values: np.ndarray
    mask: np.ndarray
    lineage: tuple = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if values.shape != mask.shape:
            raise ValueError("values and mask shapes differ")
        with np.errstate(invalid="ignore"):
            mask = mask & np.isfinite(values)
        values = np.where(mask, values, np.nan)
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "lineage", tuple(self.lineage))

    @property
    def shape(self):
        return self.values.shape

    def derive(self, values, mask=None, step=None, name=None) -> "FactorPanel":
        """New panel with ``step`` appended to the lineage."""
        lineage = self.lineage + ((step,) if step else ())
        return FactorPanel(
            name=name or self.name,
            values=values,
            mask=self.mask if mask is None else mask,
            lineage=lineage,
        )

    def rows(self, sl) -> "FactorPanel":
        return replace(self, values=self.values[sl], mask=self.mask[sl])


def alpha_momentum_volume(panel: PricePanel, d: int = 20, normalized: bool = False) -> FactorPanel:
    """``rank(d-day return) * rank(volume)``, both ranks taken across securities per date."""
    T = panel.shape[0]
    if not (1 <= d < T):
        raise InvalidWindowError(f"lookback d must satisfy 1 <= d < T={T}")
    prev, pmask = kernels.lag(panel.close, panel.mask, d)
    valid = pmask & panel.mask
    with np.errstate(invalid="ignore", divide="ignore"):
        mom = np.where(valid, (panel.close - prev) / prev, np.nan)
    # both ranks over the same eligible cross-section
    r_mom, _ = kernels.cross_rank(mom, valid, normalized=normalized)
    r_vol, _ = kernels.cross_rank(panel.volume, valid, normalized=normalized)
    return FactorPanel(
        name=f"mom_vol_{d}",
        values=r_mom * r_vol,
        mask=valid,
        lineage=(f"delta(close,{d})/lag(close,{d})", "cross_rank", "cross_rank(volume)", "multiply"),
    )


def market_return(returns, mask):
    """Equal-weighted mean of valid returns per date; NaN where none is valid."""
    cnt = mask.sum(axis=1)
    tot = np.where(mask, returns, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)


def rolling_beta(panel: PricePanel, market_returns=None, w: int = 250) -> FactorPanel:
    """Trailing-window beta of each security's daily return on the market return.

    ``market_returns`` defaults to the equal-weighted mean of valid security
    returns. Windows with (near) zero market variance are masked.
    """
    if w < 2:
        raise InvalidWindowError("beta window must be >= 2")
    daily = trailing_returns(panel, 1)
    r, rmask = daily.returns, daily.mask
    if market_returns is None:
        rm = market_return(r, rmask)
    else:
        rm = np.asarray(market_returns, dtype=np.float64)
        if rm.shape != (panel.shape[0],):
            raise ConfigError("market_returns must be a T-vector")
    rm_col = rm[:, None]
    rm_mask = np.isfinite(rm_col)
    cov, cmask = kernels.rolling_cov(r, rmask, rm_col, rm_mask, w)
    var, vmask = kernels.rolling_cov(rm_col, rm_mask, rm_col, rm_mask, w)
    mean_m, _ = kernels.rolling_mean(rm_col, rm_mask, w)
    with np.errstate(invalid="ignore"):
        # variance at rounding-noise level relative to the mean means a flat market
        flat = ~(var > 1e-24 * np.maximum(mean_m**2, 1e-300))
    valid = cmask & vmask & ~flat
    with np.errstate(invalid="ignore", divide="ignore"):
        beta = np.where(valid, cov / var, np.nan)
    return FactorPanel(name=f"beta_{w}", values=beta, mask=valid, lineage=(f"rolling_beta(w={w})",))


def write_factor_csv(factor: FactorPanel, panel: PricePanel, path) -> None:
    """``date,security_id,value`` rows for valid cells only."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "security_id", "value"])
        for t in range(factor.shape[0]):
            day = str(panel.dates[t])
            for j in np.flatnonzero(factor.mask[t]):
                w.writerow([day, panel.securities[j], repr(float(factor.values[t, j]))])


def read_factor_csv(path, panel: PricePanel, name: str | None = None) -> FactorPanel:
    """Load a factor CSV aligned to ``panel``; unknown dates/securities are ignored."""
    path = Path(path)
    T, N = panel.shape
    date_ix = {d: i for i, d in enumerate(panel.dates.tolist())}
    sec_ix = {s: j for j, s in enumerate(panel.securities)}
    values = np.full((T, N), np.nan)
    mask = np.zeros((T, N), dtype=bool)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[:3] != ["date", "security_id", "value"]:
            raise PanelParseError("factor CSV header must be date,security_id,value", 1, path)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) < 3:
                raise PanelParseError("expected 3 fields", lineno, path)
            try:
                day = np.datetime64(rec[0].strip(), "D").tolist()
                val = float(rec[2])
            except ValueError:
                raise PanelParseError(f"cannot parse row {rec!r}", lineno, path) from None
            i, j = date_ix.get(day), sec_ix.get(rec[1].strip())
            if i is None or j is None:
                continue
            values[i, j] = val
            mask[i, j] = np.isfinite(val)
    return FactorPanel(name=name or path.stem, values=values, mask=mask & panel.mask, lineage=(f"csv:{path.name}",))
