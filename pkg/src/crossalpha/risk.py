"""Factor risk model ``Sigma = B Omega B' + diag(Delta) + eps I``.

The assembled model is kept in factored form. Quadratic forms and
matrix-vector products cost O(NK); shifted solves
``(scale * Sigma + shift * I)^-1`` use the Woodbury identity with a K x K
system, so an N x N matrix is only built on request.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import ConfigError
from .panel import ReturnPanel

logger = logging.getLogger(__name__)

IDIO_FLOOR = 1e-8
DENSE_LIMIT = 1000


def standardize_rows(values, mask):
    """Per-date z-score over valid cells (population std); zero-dispersion rows become 0."""
    n = mask.sum(axis=-1, keepdims=True)
    nn = np.maximum(n, 1)
    mean = np.where(mask, values, 0.0).sum(axis=-1, keepdims=True) / nn
    dev = np.where(mask, values - mean, 0.0)
    std = np.sqrt((dev * dev).sum(axis=-1, keepdims=True) / nn)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(std > 0, dev / std, 0.0)
    return np.where(mask, z, np.nan)


@dataclass
class FactorReturns:
    """Cross-sectional regression output.

    ``values`` is T x K (NaN on dates that could not be fitted, 0 for a column
    dropped as collinear). ``intercept`` is the per-date market term,
    ``fitted``/``residuals`` are T x N.
    """

    values: np.ndarray
    intercept: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    flags: list = field(default_factory=list)


def _independent_columns(X, tol=1e-10):
    """Indices of a maximal independent column set, preferring lower indices."""
    s = np.linalg.svd(X, compute_uv=False)
    if s[-1] > tol * max(s[0], 1e-300):
        return list(range(X.shape[1]))
    keep = []
    for j in range(X.shape[1]):
        cand = keep + [j]
        sub = X[:, cand]
        s = np.linalg.svd(sub, compute_uv=False)
        if s[-1] > tol * max(s[0], 1e-300):
            keep = cand
    return keep


def factor_returns(factors, returns: ReturnPanel, min_extra: int = 0) -> FactorReturns:
    """Per-date OLS of returns on ``[1, standardized exposures]``.

    Exposures are z-scored across securities on each date. Dates with fewer
    than ``K + 1 + min_extra`` joint-valid names are left NaN. Collinear
    exposure columns are dropped for that date (lower index kept, return set
    to 0) and flagged.
    """
    factors = list(factors)
    K = len(factors)
    R = returns.returns
    T, N = R.shape
    joint = returns.mask.copy()
    for f in factors:
        if f.shape != (T, N):
            raise ConfigError("factor and return panels are not aligned")
        joint &= f.mask
    Z = np.stack([standardize_rows(f.values, joint) for f in factors], axis=-1) if K else np.zeros((T, N, 0))
    values = np.full((T, K), np.nan)
    intercept = np.full(T, np.nan)
    fitted = np.full((T, N), np.nan)
    resid = np.full((T, N), np.nan)
    flags = []
    for t in range(T):
        idx = np.flatnonzero(joint[t])
        if len(idx) < K + 1 + min_extra:
            continue
        X = np.column_stack([np.ones(len(idx)), Z[t, idx]])
        keep = _independent_columns(X)
        if len(keep) < K + 1:
            dropped = [j - 1 for j in range(K + 1) if j not in keep]
            flags.append((t, f"collinear exposures dropped: {dropped}"))
        y = R[t, idx]
        coef = np.zeros(K + 1)
        coef[keep] = np.linalg.lstsq(X[:, keep], y, rcond=None)[0]
        fit = X @ coef
        fitted[t, idx] = fit
        resid[t, idx] = y - fit
        intercept[t] = coef[0]
        values[t] = coef[1:]
    return FactorReturns(values, intercept, fitted, resid, flags)


def ewma_cov(factor_rets, lam: float = 0.97):
    """Exponentially weighted second-moment matrix of factor returns.

    Most recent row gets weight proportional to 1, the one before ``lam``, and
    so on; weights are renormalized over the rows available (rows with any
    NaN are skipped). Not mean-centered. Returns a symmetric K x K matrix.
    """
    F = np.asarray(factor_rets, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    if not (0.0 < lam < 1.0):
        raise ConfigError("lambda must lie in (0, 1)")
    F = F[np.all(np.isfinite(F), axis=1)]
    if len(F) < 1:
        raise ConfigError("no complete factor-return rows")
    n = len(F)
    w = lam ** np.arange(n - 1, -1, -1, dtype=np.float64)
    w /= w.sum()
    omega = (F * w[:, None]).T @ F
    return 0.5 * (omega + omega.T)


def idio_variance(returns, fitted, floor: float = IDIO_FLOOR, window=None, flags=None):
    """Per-security sample variance (``n - 1``) of regression residuals, floored.

    ``returns`` is a :class:`ReturnPanel` or a T x N array; ``fitted`` the
    matching fitted values (pass zeros to treat ``returns`` as residuals).
    Securities with fewer than two residuals get ``floor`` and are listed
    in ``flags`` when given.
    """
    R = returns.returns if isinstance(returns, ReturnPanel) else np.asarray(returns, dtype=np.float64)
    resid = R - np.asarray(fitted, dtype=np.float64)
    if window is not None:
        resid = resid[-window:]
    ok = np.isfinite(resid)
    n = ok.sum(axis=0)
    nn = np.maximum(n, 1)
    mean = np.where(ok, resid, 0.0).sum(axis=0) / nn
    dev = np.where(ok, resid - mean, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        var = (dev * dev).sum(axis=0) / np.maximum(n - 1, 1)
    short = n < 2
    if flags is not None:
        flags.extend(int(j) for j in np.flatnonzero(short))
    var = np.where(short, floor, var)
    return np.maximum(var, floor)


@dataclass(frozen=True, eq=False)
class RiskModel:
    """``Sigma~ = B Omega B' + diag(idio_var) + epsilon I`` in factored form."""

    loadings: np.ndarray  # N x K
    factor_cov: np.ndarray  # K x K
    idio_var: np.ndarray  # N
    epsilon: float = 1e-6

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.loadings, dtype=np.float64))
        d = np.asarray(self.idio_var, dtype=np.float64).ravel()
        if B.shape[0] != len(d) and B.size == 0:
            B = np.zeros((len(d), 0))
        omega = np.asarray(self.factor_cov, dtype=np.float64).reshape(B.shape[1], B.shape[1])
        if B.shape[0] != len(d):
            raise ConfigError(f"loadings have {B.shape[0]} rows but idio_var has {len(d)} entries")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if np.any(d < 0):
            raise ConfigError("idiosyncratic variances must be >= 0")
        if not np.allclose(omega, omega.T, atol=1e-12, rtol=0):
            raise ConfigError("factor covariance must be symmetric")
        object.__setattr__(self, "loadings", B)
        object.__setattr__(self, "factor_cov", 0.5 * (omega + omega.T))
        object.__setattr__(self, "idio_var", d)

    @property
    def n(self):
        return len(self.idio_var)

    @property
    def k(self):
        return self.loadings.shape[1]

    @property
    def diag(self):
        return self.idio_var + self.epsilon

    @classmethod
    def from_dense(cls, sigma, epsilon=0.0):
        """Factor a dense PSD matrix as ``V diag(e) V'`` with no idiosyncratic part."""
        sigma = np.asarray(sigma, dtype=np.float64)
        e, V = np.linalg.eigh(0.5 * (sigma + sigma.T))
        e = np.clip(e, 0.0, None)
        return cls(V, np.diag(e), np.zeros(len(e)), epsilon)

    def matvec(self, w):
        w = np.asarray(w, dtype=np.float64)
        B = self.loadings
        if w.ndim == 1:
            return B @ (self.factor_cov @ (B.T @ w)) + self.diag * w
        return B @ (self.factor_cov @ (B.T @ w)) + self.diag[:, None] * w

    def quad(self, w):
        w = np.asarray(w, dtype=np.float64)
        b = self.loadings.T @ w
        return float(b @ self.factor_cov @ b + np.sum(self.diag * w * w))

    def dense(self):
        if self.n > DENSE_LIMIT:
            raise ConfigError(f"refusing to materialize a {self.n}x{self.n} covariance (limit {DENSE_LIMIT})")
        B = self.loadings
        S = B @ self.factor_cov @ B.T
        return 0.5 * (S + S.T) + np.diag(self.diag)

    def submodel(self, idx) -> "RiskModel":
        return RiskModel(self.loadings[idx], self.factor_cov, self.idio_var[idx], self.epsilon)

    def scaled(self, c: float) -> "RiskModel":
        """Model for ``c * Sigma~`` (``c > 0``)."""
        return RiskModel(self.loadings, c * self.factor_cov, c * self.idio_var, c * self.epsilon)

    def shifted_solver(self, scale: float, shift: float):
        """Return ``solve(b)`` for ``(scale * Sigma~ + shift * I) x = b``.

        Uses ``(D + s B Omega B')^-1 = D^-1 - D^-1 B (I + s Omega B' D^-1 B)^-1 s Omega B' D^-1``
        with ``D = scale * diag + shift``, which needs no inverse of Omega.
        """
        D = scale * self.diag + shift
        if np.any(D <= 0):
            raise ConfigError("shifted system is not positive definite")
        Dinv = 1.0 / D
        B = self.loadings
        K = self.k
        if K == 0:
            return lambda b: (Dinv * b.T).T
        G = B.T @ (Dinv[:, None] * B)
        S = scale * self.factor_cov
        C = np.eye(K) + S @ G
        lu = scipy.linalg.lu_factor(C)

        def solve(b):
            b = np.asarray(b, dtype=np.float64)
            y = (Dinv * b.T).T
            corr = B @ scipy.linalg.lu_solve(lu, S @ (B.T @ y))
            return y - (Dinv * corr.T).T

        return solve

    def save(self, directory, securities=None):
        """Write ``loadings.csv``, ``factor_cov.csv`` and ``idio_var.csv``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        ids = list(securities) if securities is not None else [f"S{j}" for j in range(self.n)]
        names = [f"f{k}" for k in range(self.k)]
        with (d / "loadings.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["security_id", *names])
            for sid, row in zip(ids, self.loadings):
                w.writerow([sid, *map(repr, map(float, row))])
        with (d / "factor_cov.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["factor", *names])
            for name, row in zip(names, self.factor_cov):
                w.writerow([name, *map(repr, map(float, row))])
        with (d / "idio_var.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["security_id", "idio_var"])
            for sid, v in zip(ids, self.idio_var):
                w.writerow([sid, repr(float(v))])
            w.writerow(["__epsilon__", repr(float(self.epsilon))])

    @classmethod
    def load(cls, directory):
        """Inverse of :meth:`save`; returns ``(model, security_ids)``."""
        d = Path(directory)
        with (d / "loadings.csv").open(newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        ids = [r[0] for r in rows]
        B = np.array([[float(x) for x in r[1:]] for r in rows]).reshape(len(rows), -1)
        with (d / "factor_cov.csv").open(newline="") as fh:
            crow = list(csv.reader(fh))[1:]
        omega = np.array([[float(x) for x in r[1:]] for r in crow]).reshape(len(crow), len(crow))
        eps = 0.0
        idio = {}
        with (d / "idio_var.csv").open(newline="") as fh:
            for r in list(csv.reader(fh))[1:]:
                if r[0] == "__epsilon__":
                    eps = float(r[1])
                else:
                    idio[r[0]] = float(r[1])
        return cls(B, omega, np.array([idio[s] for s in ids]), eps), ids


def assemble(loadings, factor_cov, idio_var, epsilon: float = 1e-6) -> RiskModel:
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    return RiskModel(loadings, factor_cov, idio_var, epsilon)
