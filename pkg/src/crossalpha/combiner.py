"""Pooled ridge regression from standardized factor exposures to forward returns."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .panel import ReturnPanel

logger = logging.getLogger(__name__)

INTERCEPT_ROW = "__intercept__"


def ridge_solve(X, y, lam: float):
    """``(X'X + lam I)^-1 X'y`` via a symmetric solve."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if lam < 0:
        raise ConfigError("ridge lambda must be >= 0")
    A = X.T @ X + lam * np.eye(X.shape[1])
    b = X.T @ y
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, b, rcond=None)[0]


@dataclass(frozen=True)
class CombinerModel:
    """Ridge weights on exposures standardized with training-window statistics.

    ``means``/``stds`` are the pooled per-factor statistics from the training
    window; ``predict`` applies them unchanged, so later data never leaks in.
    """

    names: tuple
    weights: np.ndarray
    intercept: float
    means: np.ndarray
    stds: np.ndarray
    ridge_lambda: float
    training_window: tuple = (0, 0)

    def __post_init__(self):
        if self.ridge_lambda < 0:
            raise ConfigError("ridge lambda must be >= 0")
        if not np.all(np.isfinite(self.weights)):
            raise ConfigError("combiner weights must be finite")

    def standardize(self, values):
        """Map raw exposures (``..., K``) to training-standardized units."""
        return (np.asarray(values, dtype=np.float64) - self.means) / self.stds

    def predict_raw(self, exposures):
        """``intercept + z . weights`` for raw exposures of shape ``(..., K)``; NaN rows stay NaN."""
        return self.intercept + self.standardize(exposures) @ self.weights

    def save(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["factor", "weight", "mean", "std"])
            for n, wt, m, s in zip(self.names, self.weights, self.means, self.stds):
                w.writerow([n, repr(float(wt)), repr(float(m)), repr(float(s))])
            w.writerow([INTERCEPT_ROW, repr(float(self.intercept)), repr(float(self.ridge_lambda)), ""])

    @classmethod
    def load(cls, path):
        names, weights, means, stds = [], [], [], []
        intercept, lam = 0.0, 0.0
        with Path(path).open(newline="") as fh:
            for row in list(csv.reader(fh))[1:]:
                if row[0] == INTERCEPT_ROW:
                    intercept, lam = float(row[1]), float(row[2])
                    continue
                names.append(row[0])
                weights.append(float(row[1]))
                means.append(float(row[2]))
                stds.append(float(row[3]))
        return cls(tuple(names), np.array(weights), intercept, np.array(means), np.array(stds), lam)


def stack_exposures(factors):
    """``(T, N, K)`` array of factor values and the joint validity mask."""
    factors = list(factors)
    X = np.stack([f.values for f in factors], axis=-1)
    mask = np.logical_and.reduce([f.mask for f in factors])
    return X, mask


def fit(factors, returns: ReturnPanel, window, ridge_lambda: float = 1.0) -> CombinerModel:
    """Ridge fit pooled over the dates in ``window`` (a slice or ``(start, stop)`` index pair).

    Exposures are standardized with their pooled mean and std over the
    window's valid observations. The target is centered, its mean becomes the
    intercept, and ``weights = (Z'Z + lambda I)^-1 Z'(y - mean(y))``.
    """
    factors = list(factors)
    if not factors:
        raise ConfigError("need at least one factor")
    start, stop = (window.start or 0, window.stop) if isinstance(window, slice) else window
    T = returns.returns.shape[0]
    stop = T if stop is None else stop
    if not (0 <= start < stop <= T):
        raise ConfigError(f"empty or out-of-range training window [{start}, {stop})")
    X, mask = stack_exposures(factors)
    use = mask[start:stop] & returns.mask[start:stop]
    Xw = X[start:stop][use]
    y = returns.returns[start:stop][use]
    K = len(factors)
    if len(y) < K + 2:
        raise ConfigError(f"training window has {len(y)} observations, need >= {K + 2}")
    means = Xw.mean(axis=0)
    stds = Xw.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    Z = (Xw - means) / stds
    ybar = float(y.mean())
    weights = ridge_solve(Z, y - ybar, ridge_lambda)
    logger.debug("combiner fit on %d obs, window [%d, %d): weights %s", len(y), start, stop, weights)
    return CombinerModel(
        names=tuple(f.name for f in factors),
        weights=weights,
        intercept=ybar,
        means=means,
        stds=stds,
        ridge_lambda=float(ridge_lambda),
        training_window=(int(start), int(stop)),
    )


def predict(model: CombinerModel, factors, t: int | None = None):
    """Expected returns from factor panels: one date (N-vector) or all dates (T x N).

    Securities missing any exposure get NaN.
    """
    X, mask = stack_exposures(factors)
    if t is not None:
        X, mask = X[t], mask[t]
    mu = model.predict_raw(np.where(mask[..., None], X, 0.0))
    return np.where(mask, mu, np.nan)
