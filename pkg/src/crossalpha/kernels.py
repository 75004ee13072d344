"""Batched time-series and cross-sectional kernels over T x N matrices.

Every kernel takes ``(x, mask)`` and returns ``(values, mask)``. Invalid cells
hold NaN in ``values``; the returned mask is authoritative.

Rolling statistics are computed as a sum of ``w`` shifted slices of the whole
matrix, i.e. a length-``w`` box convolution along time applied to all columns
at once. Each output cell is therefore a fixed-order reduction over exactly
its own window, which makes chunked evaluation bit-identical to a single pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidWindowError

ROLLING_KINDS = ("rolling_mean", "rolling_std", "rolling_min", "rolling_max", "rolling_sum")
KERNEL_KINDS = ROLLING_KINDS + ("cross_rank", "ewma", "lag", "delta")


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    window: int = 1
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError("alpha must lie in (0, 1]")
        if self.kind == "rolling_std" and self.window < 2:
            raise ConfigError("rolling_std needs window >= 2")

    @property
    def lookback(self):
        if self.kind in ROLLING_KINDS:
            return self.window - 1
        if self.kind in ("lag", "delta"):
            return self.window
        return 0


def _as_float(x, mask):
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if x.shape != mask.shape:
        raise ValueError(f"values {x.shape} and mask {mask.shape} disagree")
    return x, mask


def _masked_nan(x, mask):
    return np.where(mask, x, np.nan)


def _window_sum(xf, w):
    # xf: NaN-filled (T, N). Returns (T-w+1, N) sums, oldest element first.
    n = xf.shape[0] - w + 1
    acc = xf[0:n].copy()
    for k in range(1, w):
        acc += xf[k : k + n]
    return acc


def _rolling_core(xf, kind, w):
    """Rolling statistic on a NaN-filled matrix; rows before a full window are NaN."""
    T = xf.shape[0]
    out = np.full(xf.shape, np.nan)
    if T < w:
        return out
    n = T - w + 1
    if kind == "rolling_sum":
        out[w - 1 :] = _window_sum(xf, w)
    elif kind == "rolling_mean":
        out[w - 1 :] = _window_sum(xf, w) / w
    elif kind == "rolling_std":
        mean = _window_sum(xf, w) / w
        ss = np.zeros_like(mean)
        for k in range(w):
            d = xf[k : k + n] - mean
            ss += d * d
        out[w - 1 :] = np.sqrt(ss / (w - 1))
    elif kind in ("rolling_min", "rolling_max"):
        op = np.minimum if kind == "rolling_min" else np.maximum
        acc = xf[0:n].copy()
        for k in range(1, w):
            # np.minimum/maximum propagate NaN, so one gap masks the window
            acc = op(acc, xf[k : k + n])
        out[w - 1 :] = acc
    else:
        raise ConfigError(f"{kind!r} is not a rolling kernel")
    return out


def rolling_apply(x, mask, spec: KernelSpec):
    """Apply a rolling kernel to every column.

    A cell is valid only when all ``w`` observations of its window are valid.
    """
    x, mask = _as_float(x, mask)
    if spec.kind not in ROLLING_KINDS:
        raise ConfigError(f"{spec.kind!r} is not a rolling kernel")
    if spec.window > x.shape[0]:
        raise InvalidWindowError(f"window {spec.window} exceeds panel length {x.shape[0]}")
    out = _rolling_core(_masked_nan(x, mask), spec.kind, spec.window)
    valid = np.isfinite(out)
    return np.where(valid, out, np.nan), valid


def rolling_sum(x, mask, window):
    return rolling_apply(x, mask, KernelSpec("rolling_sum", window))


def rolling_mean(x, mask, window):
    return rolling_apply(x, mask, KernelSpec("rolling_mean", window))


def rolling_std(x, mask, window):
    return rolling_apply(x, mask, KernelSpec("rolling_std", window))


def rolling_min(x, mask, window):
    return rolling_apply(x, mask, KernelSpec("rolling_min", window))


def rolling_max(x, mask, window):
    return rolling_apply(x, mask, KernelSpec("rolling_max", window))


def lag(x, mask, window):
    """``out[t] = x[t - window]``."""
    x, mask = _as_float(x, mask)
    out = np.full(x.shape, np.nan)
    valid = np.zeros(x.shape, dtype=bool)
    if window < x.shape[0]:
        out[window:] = x[:-window] if window else x
        valid[window:] = mask[:-window] if window else mask
    out = np.where(valid, out, np.nan)
    return out, valid


def delta(x, mask, window):
    """``out[t] = x[t] - x[t - window]``."""
    x, mask = _as_float(x, mask)
    prev, pmask = lag(x, mask, window)
    valid = pmask & mask
    out = np.where(valid, x - prev, np.nan)
    return out, valid


def cross_rank(x, mask, normalized=False):
    """Per-date ranks 1..n_valid, ascending; ties broken by column index.

    With ``normalized`` the ranks are mapped to ``(rank - 0.5) / n_valid``.
    """
    x, mask = _as_float(x, mask)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    m2 = np.atleast_2d(mask)
    keyed = np.where(m2, x2, np.inf)
    order = np.argsort(keyed, axis=1, kind="stable")
    ranks = np.empty(x2.shape, dtype=np.float64)
    rows = np.arange(x2.shape[0])[:, None]
    ranks[rows, order] = np.arange(1, x2.shape[1] + 1, dtype=np.float64)[None, :]
    if normalized:
        n_valid = m2.sum(axis=1, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            ranks = (ranks - 0.5) / n_valid
    ranks = np.where(m2, ranks, np.nan)
    if squeeze:
        return ranks[0], m2[0]
    return ranks, m2.copy()


@dataclass
class EwmaState:
    """Carry-over between chunks: last smoothed value and whether a column has started."""

    value: np.ndarray
    started: np.ndarray


def ewma_stream(x, mask, alpha, state: EwmaState | None = None):
    """EWMA over rows of ``x`` continuing from ``state``.

    The recursion starts at each column's first valid observation. Masked
    cells leave the state untouched and stay masked in the output.
    """
    x, mask = _as_float(x, mask)
    if not (0.0 < alpha <= 1.0):
        raise ConfigError("alpha must lie in (0, 1]")
    T, N = x.shape
    if state is None:
        cur = np.full(N, np.nan)
        started = np.zeros(N, dtype=bool)
    else:
        cur = state.value.copy()
        started = state.started.copy()
    out = np.full((T, N), np.nan)
    valid = np.zeros((T, N), dtype=bool)
    beta = 1.0 - alpha
    for t in range(T):
        m = mask[t]
        upd = m & started
        cur[upd] = alpha * x[t, upd] + beta * cur[upd]
        init = m & ~started
        cur[init] = x[t, init]
        started |= m
        out[t, m] = cur[m]
        valid[t] = m
    return out, valid, EwmaState(cur, started)


def ewma(x, mask, alpha):
    out, valid, _ = ewma_stream(x, mask, alpha)
    return out, valid


def apply_kernel(x, mask, spec: KernelSpec, normalized=False):
    """Dispatch on ``spec.kind``."""
    if spec.kind in ROLLING_KINDS:
        return rolling_apply(x, mask, spec)
    if spec.kind == "cross_rank":
        return cross_rank(x, mask, normalized=normalized)
    if spec.kind == "ewma":
        return ewma(x, mask, spec.alpha)
    if spec.kind == "lag":
        return lag(x, mask, spec.window)
    if spec.kind == "delta":
        return delta(x, mask, spec.window)
    raise ConfigError(f"unknown kernel {spec.kind!r}")


def rolling_cov(x, xmask, y, ymask, window):
    """Two-pass rolling sample covariance between matching columns of ``x`` and ``y``.

    ``y`` may be a single column (T, 1) broadcast against ``x``.
    """
    x, xmask = _as_float(x, xmask)
    y, ymask = _as_float(y, ymask)
    if window < 2:
        raise InvalidWindowError("covariance needs window >= 2")
    if window > x.shape[0]:
        raise InvalidWindowError(f"window {window} exceeds panel length {x.shape[0]}")
    xf = _masked_nan(x, xmask)
    yf = _masked_nan(y, ymask)
    T = x.shape[0]
    n = T - window + 1
    mx = _window_sum(xf, window) / window
    my = _window_sum(yf, window) / window
    acc = np.zeros(np.broadcast_shapes(mx.shape, my.shape))
    for k in range(window):
        acc += (xf[k : k + n] - mx) * (yf[k : k + n] - my)
    out = np.full((T,) + acc.shape[1:], np.nan)
    out[window - 1 :] = acc / (window - 1)
    valid = np.isfinite(out)
    return out, valid
