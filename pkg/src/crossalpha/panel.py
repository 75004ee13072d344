"""Aligned date x security panels: loading, validation, returns.

Missing data is carried as an explicit boolean ``mask`` next to every matrix.
Values under a false mask are NaN but callers must rely on the mask, never on
the sentinel.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyUniverseError, InvalidHorizonError, PanelParseError

logger = logging.getLogger(__name__)

PRICE_FIELDS = ("open", "high", "low", "close", "volume", "market_cap")
DEFAULT_MIN_HISTORY = 250


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ColumnSpec:
    """Maps logical panel fields to CSV header names."""

    date: str = "date"
    security_id: str = "security_id"
    open: str = "open"
    high: str = "high"
    low: str = "low"
    close: str = "close"
    volume: str = "volume"
    market_cap: str = "market_cap"
    industry: str = "industry"

    def columns(self):
        return {
            "date": self.date,
            "security_id": self.security_id,
            **{f: getattr(self, f) for f in PRICE_FIELDS},
            "industry": self.industry,
        }


@dataclass(frozen=True, eq=False)
class PricePanel:
    """Dense T x N panel of prices, volumes, caps and static industry codes."""

    dates: np.ndarray  # datetime64[D], strictly increasing
    securities: tuple
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    market_cap: np.ndarray
    industry: np.ndarray  # int, one code per security
    mask: np.ndarray

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        object.__setattr__(self, "dates", _freeze(dates))
        object.__setattr__(self, "securities", tuple(str(s) for s in self.securities))
        T, N = len(dates), len(self.securities)
        for name in PRICE_FIELDS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (T, N):
                raise ValueError(f"{name} has shape {arr.shape}, expected {(T, N)}")
            object.__setattr__(self, name, _freeze(arr))
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != (T, N):
            raise ValueError(f"mask has shape {mask.shape}, expected {(T, N)}")
        industry = np.asarray(self.industry, dtype=np.int64)
        if industry.shape != (N,):
            raise ValueError("industry must hold one code per security")
        if N and industry.min() < 0:
            raise ValueError("industry codes must be non-negative")
        if T > 1 and not np.all(np.diff(dates) > np.timedelta64(0, "D")):
            raise ValueError("dates must be strictly increasing")
        if len(set(self.securities)) != N:
            raise ValueError("duplicate security ids")
        with np.errstate(invalid="ignore"):
            ok = (self.close > 0) & (self.volume >= 0) & (self.market_cap > 0)
        if np.any(mask & ~ok):
            raise ValueError("mask is true on an observation with close<=0, volume<0 or market_cap<=0")
        object.__setattr__(self, "mask", _freeze(mask))
        object.__setattr__(self, "industry", _freeze(industry))

    @property
    def shape(self):
        return self.close.shape

    @property
    def n_industries(self):
        return int(self.industry.max()) + 1 if len(self.industry) else 0

    def select(self, rows=slice(None), cols=slice(None)) -> "PricePanel":
        """Sub-panel by date rows and/or security columns."""
        cols_idx = np.arange(len(self.securities))[cols]
        return PricePanel(
            dates=self.dates[rows],
            securities=[self.securities[j] for j in np.atleast_1d(cols_idx)],
            industry=self.industry[cols_idx],
            mask=self.mask[rows][:, cols_idx],
            **{f: getattr(self, f)[rows][:, cols_idx] for f in PRICE_FIELDS},
        )

    def with_mask(self, mask) -> "PricePanel":
        mask = np.asarray(mask, dtype=bool) & self.mask
        return PricePanel(
            dates=self.dates,
            securities=self.securities,
            industry=self.industry,
            mask=mask,
            **{f: getattr(self, f) for f in PRICE_FIELDS},
        )


@dataclass(frozen=True, eq=False)
class ReturnPanel:
    returns: np.ndarray
    mask: np.ndarray
    horizon: int
    alignment: str = "forward"

    def __post_init__(self):
        if self.alignment not in ("forward", "trailing"):
            raise ValueError(f"unknown alignment {self.alignment!r}")
        object.__setattr__(self, "returns", _freeze(np.asarray(self.returns, dtype=np.float64)))
        object.__setattr__(self, "mask", _freeze(np.asarray(self.mask, dtype=bool)))


def _parse_float(text, line, column, path):
    text = text.strip()
    if text == "" or text.lower() in ("na", "nan", "null"):
        return np.nan
    try:
        return float(text)
    except ValueError:
        raise PanelParseError(f"column {column!r}: cannot parse {text!r} as a number", line, path) from None


def load_panel(path, spec: ColumnSpec | None = None, min_history: int = DEFAULT_MIN_HISTORY) -> PricePanel:
    """Read a long-format panel CSV into a validated :class:`PricePanel`.

    Parameters
    ----------
    path : str or Path
        CSV with one row per (date, security).
    spec : ColumnSpec, optional
        Header names; defaults to the canonical schema.
    min_history : int
        Securities with fewer valid days are dropped. The default of 250
        matches a one-year listing filter; pass a smaller value for toy files.

    Raises
    ------
    PanelParseError
        Missing header columns, unparseable values, duplicate rows, or an
        industry code that changes over time. The message carries the line.
    EmptyUniverseError
        No security survives validation.
    """
    spec = spec or ColumnSpec()
    path = Path(path)
    cols = spec.columns()
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelParseError("empty file (header required)", 1, path) from None
        header = [h.strip() for h in header]
        pos = {}
        for key, name in cols.items():
            if name not in header:
                raise PanelParseError(f"missing required column {name!r}", 1, path)
            pos[key] = header.index(name)
        unknown = [h for h in header if h not in cols.values()]
        if unknown:
            logger.warning("ignoring unknown columns: %s", ", ".join(unknown))
        width = len(header)
        for lineno, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) != width:
                raise PanelParseError(f"expected {width} fields, got {len(rec)}", lineno, path)
            try:
                day = np.datetime64(rec[pos["date"]].strip(), "D")
            except ValueError:
                raise PanelParseError(f"bad date {rec[pos['date']]!r}", lineno, path) from None
            sid = rec[pos["security_id"]].strip()
            if not sid:
                raise PanelParseError("empty security_id", lineno, path)
            values = [_parse_float(rec[pos[f]], lineno, cols[f], path) for f in PRICE_FIELDS]
            ind_text = rec[pos["industry"]].strip()
            if ind_text == "":
                ind = -1
            else:
                try:
                    ind = int(ind_text)
                except ValueError:
                    raise PanelParseError(f"industry must be an integer, got {ind_text!r}", lineno, path) from None
                if ind < 0:
                    raise PanelParseError(f"industry must be non-negative, got {ind}", lineno, path)
            rows.append((lineno, day, sid, values, ind))

    if not rows:
        raise EmptyUniverseError(f"{path}: no data rows")

    dates = np.array(sorted({r[1] for r in rows}), dtype="datetime64[D]")
    sec_order = list(dict.fromkeys(r[2] for r in rows))
    date_ix = {d: i for i, d in enumerate(dates.tolist())}
    sec_ix = {s: j for j, s in enumerate(sec_order)}
    T, N = len(dates), len(sec_order)
    data = np.full((len(PRICE_FIELDS), T, N), np.nan)
    seen = np.zeros((T, N), dtype=bool)
    industry = np.full(N, -1, dtype=np.int64)
    for lineno, day, sid, values, ind in rows:
        i, j = date_ix[day.tolist()], sec_ix[sid]
        if seen[i, j]:
            raise PanelParseError(f"duplicate row for ({day}, {sid})", lineno, path)
        seen[i, j] = True
        data[:, i, j] = values
        if ind >= 0:
            if industry[j] >= 0 and industry[j] != ind:
                raise PanelParseError(f"industry of {sid} changes from {industry[j]} to {ind}", lineno, path)
            industry[j] = ind

    with np.errstate(invalid="ignore"):
        mask = seen & np.all(np.isfinite(data), axis=0)
        mask &= (data[3] > 0) & (data[4] >= 0) & (data[5] > 0)

    keep = (mask.sum(axis=0) >= min_history) & (industry >= 0)
    dropped = [s for s, k in zip(sec_order, keep) if not k]
    if dropped:
        logger.info("dropping %d securities with short history or no industry", len(dropped))
    if not keep.any():
        raise EmptyUniverseError(f"{path}: no security has {min_history} valid days")
    data = np.where(mask, data, np.nan)[:, :, keep]
    return PricePanel(
        dates=dates,
        securities=[s for s, k in zip(sec_order, keep) if k],
        industry=industry[keep],
        mask=mask[:, keep],
        **{f: data[k] for k, f in enumerate(PRICE_FIELDS)},
    )


def write_panel(panel: PricePanel, path) -> None:
    """Write valid observations in the canonical CSV schema.

    Floats use ``repr`` so a reload is bit-exact.
    """
    path = Path(path)
    T, N = panel.shape
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "security_id", *PRICE_FIELDS, "industry"])
        for t in range(T):
            day = str(panel.dates[t])
            for j in np.flatnonzero(panel.mask[t]):
                w.writerow(
                    [day, panel.securities[j]]
                    + [repr(float(getattr(panel, f)[t, j])) for f in PRICE_FIELDS]
                    + [int(panel.industry[j])]
                )


def forward_returns(panel: PricePanel, horizon: int = 1) -> ReturnPanel:
    """Simple forward returns ``close[t+h] / close[t] - 1``; the last ``h`` rows are missing."""
    T = panel.shape[0]
    if not (1 <= horizon < T):
        raise InvalidHorizonError(f"horizon must satisfy 1 <= h < T={T}, got {horizon}")
    out = np.full(panel.shape, np.nan)
    mask = np.zeros(panel.shape, dtype=bool)
    valid = panel.mask[:-horizon] & panel.mask[horizon:]
    with np.errstate(invalid="ignore", divide="ignore"):
        r = panel.close[horizon:] / panel.close[:-horizon] - 1.0
    out[:-horizon] = np.where(valid, r, np.nan)
    mask[:-horizon] = valid
    return ReturnPanel(out, mask, horizon, "forward")


def trailing_returns(panel: PricePanel, horizon: int = 1) -> ReturnPanel:
    """Simple trailing returns ``close[t] / close[t-h] - 1``; the first ``h`` rows are missing."""
    T = panel.shape[0]
    if not (1 <= horizon < T):
        raise InvalidHorizonError(f"horizon must satisfy 1 <= h < T={T}, got {horizon}")
    fwd = forward_returns(panel, horizon)
    out = np.full(panel.shape, np.nan)
    mask = np.zeros(panel.shape, dtype=bool)
    out[horizon:] = fwd.returns[:-horizon]
    mask[horizon:] = fwd.mask[:-horizon]
    return ReturnPanel(out, mask, horizon, "trailing")


def universe_mask(panel: PricePanel, max_abs_daily_return: float = 0.20) -> np.ndarray:
    """Input mask with observations whose daily move exceeds the threshold switched off."""
    if max_abs_daily_return <= 0:
        raise ValueError("max_abs_daily_return must be positive")
    out = panel.mask.copy()
    if panel.shape[0] < 2:
        return out
    daily = trailing_returns(panel, 1)
    with np.errstate(invalid="ignore"):
        extreme = daily.mask & (np.abs(daily.returns) > max_abs_daily_return)
    out &= ~extreme
    return out
