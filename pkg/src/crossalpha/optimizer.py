"""Turnover-penalized mean-variance portfolio optimizer.

Maximizes ::

    mu'w - (lambda/2) w' Sigma~ w - gamma * sum_i c_i |w_i - w_prev_i|

subject to ``sum(w) = 0``, zero net weight in every sector, ``|w_i| <= w_max``
and ``sum |w_i| <= L``.

The solver is ADMM on the split ``w = z``. The ``w`` step is an
equality-constrained quadratic solved through the risk model's shifted
Woodbury solver, so Sigma~ is never formed. The ``z`` step is the exact prox of
the turnover term, the box and the gross-leverage ball: a per-coordinate
closed-form piecewise-quadratic minimization plus a scalar Newton search
for the leverage multiplier. Over-relaxation and residual-balanced penalty updates speed up
convergence. Once the iterates reveal which coordinates sit on a bound or a
kink, the KKT system is solved directly on the remaining free coordinates
("polishing") and accepted only if :func:`verify_kkt` certifies it.

Because ``w = 0`` satisfies every constraint the feasible set is never
empty; ``infeasible`` is kept as a status value for interface completeness.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import ConfigError
from .risk import RiskModel

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

DEFAULT_COST = 0.0015
POLISH_EVERY = 10
RHO_EVERY = 25
ALPHA_RELAX = 1.6


@dataclass(frozen=True, eq=False)
class PortfolioProblem:
    """One rebalance problem. ``sectors`` holds an integer label per security (or None)."""

    mu_hat: np.ndarray
    risk: RiskModel
    lambda_risk: float = 1.0
    gamma_tc: float = 0.0
    costs: np.ndarray | None = None
    prev_weights: np.ndarray | None = None
    w_max: float = 0.05
    leverage: float = 2.0
    sectors: np.ndarray | None = None
    securities: tuple | None = None

    def __post_init__(self):
        mu = np.asarray(self.mu_hat, dtype=np.float64).ravel()
        n = len(mu)
        if self.risk.n != n:
            raise ConfigError(f"risk model has {self.risk.n} securities, mu_hat has {n}")
        if not np.all(np.isfinite(mu)):
            raise ConfigError("mu_hat must be finite")
        costs = np.full(n, DEFAULT_COST) if self.costs is None else np.broadcast_to(
            np.asarray(self.costs, dtype=np.float64), (n,)).copy()
        prev = np.zeros(n) if self.prev_weights is None else np.asarray(self.prev_weights, dtype=np.float64).ravel()
        if len(prev) != n or not np.all(np.isfinite(prev)):
            raise ConfigError("prev_weights must be a finite vector of length N")
        if np.any(costs < 0):
            raise ConfigError("costs must be >= 0")
        if self.lambda_risk < 0 or self.gamma_tc < 0:
            raise ConfigError("lambda_risk and gamma_tc must be >= 0")
        if not (self.w_max > 0 and self.leverage > 0):
            raise ConfigError("w_max and leverage must be > 0")
        if np.abs(prev).sum() > self.leverage + 1e-9:
            warnings.warn("prev_weights exceed the leverage limit", RuntimeWarning, stacklevel=3)
        sectors = None
        if self.sectors is not None:
            sectors = np.asarray(self.sectors).ravel()
            if len(sectors) != n:
                raise ConfigError("sectors must have one label per security")
        object.__setattr__(self, "mu_hat", mu)
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "prev_weights", prev)
        object.__setattr__(self, "sectors", sectors)
        if self.securities is not None:
            object.__setattr__(self, "securities", tuple(self.securities))

    @property
    def n(self):
        return len(self.mu_hat)

    @cached_property
    def constraint_rows(self):
        """Raw equality rows: the market row, then one indicator row per sector."""
        rows = [np.ones(self.n)]
        if self.sectors is not None:
            for s in np.unique(self.sectors):
                rows.append((self.sectors == s).astype(np.float64))
        return np.vstack(rows)

    @cached_property
    def basis(self):
        """Orthonormal rows spanning the equality constraints (redundancy removed)."""
        A = self.constraint_rows
        _, s, vt = np.linalg.svd(A, full_matrices=False)
        return vt[s > 1e-10 * s[0]]

    @property
    def tc_weights(self):
        return self.gamma_tc * self.costs

    def objective(self, w):
        w = np.asarray(w, dtype=np.float64)
        return float(
            self.mu_hat @ w
            - 0.5 * self.lambda_risk * self.risk.quad(w)
            - np.sum(self.tc_weights * np.abs(w - self.prev_weights))
        )

    def gradient(self, w):
        """Gradient of the smooth minimization part ``(lambda/2) w'Sw - mu'w``."""
        return self.lambda_risk * self.risk.matvec(w) - self.mu_hat

    def constraint_residuals(self, w):
        w = np.asarray(w, dtype=np.float64)
        sector = {}
        if self.sectors is not None:
            for s in np.unique(self.sectors):
                sector[s.item() if hasattr(s, "item") else s] = float(w[self.sectors == s].sum())
        return {
            "sum_w": float(w.sum()),
            "sector_sums": sector,
            "max_position_violation": float(max(np.abs(w).max() - self.w_max, 0.0)),
            "leverage_slack": float(self.leverage - np.abs(w).sum()),
        }


@dataclass(frozen=True, eq=False)
class PortfolioSolution:
    weights: np.ndarray
    objective: float
    constraint_residuals: dict
    iterations: int
    warm_started: bool
    status: str
    nu: np.ndarray | None = None
    theta: float = 0.0
    kkt: dict | None = None
    certificate: str = ""
    state: dict = field(default_factory=dict, repr=False)

    @property
    def max_constraint_residual(self):
        r = self.constraint_residuals
        vals = [abs(r["sum_w"]), r["max_position_violation"], max(-r["leverage_slack"], 0.0)]
        vals += [abs(v) for v in r["sector_sums"].values()]
        return max(vals)


def _prox(v, a, p, theta, rho, wmax, with_slope=False):
    """Per-coordinate argmin of ``rho/2 (z-v)^2 + a|z-p| + theta|z|`` over ``|z| <= wmax``.

    The nonsmooth part is piecewise linear with kinks ``k1 = min(0, p)`` and
    ``k2 = max(0, p)``: slope ``-(a + theta)`` left of ``k1``, ``a + theta``
    right of ``k2`` and ``m`` in between. A stationary point in an outer
    region is the minimizer; otherwise it lies in ``[k1, k2]`` where the
    problem is a clipped quadratic. Clipping to the box last is exact in 1-D.

    With ``with_slope`` also returns the count of coordinates whose ``|z|``
    moves with ``theta`` (strictly inside a region, off the box).
    """
    k1 = np.minimum(p, 0.0)
    k2 = np.maximum(p, 0.0)
    s = (a + theta) / rho
    m = np.where(p > 0, theta - a, a - theta) / rho
    t1 = v + s
    t3 = v - s
    left = t1 < k1
    right = t3 > k2
    mid = np.clip(v - m, k1, k2)
    z = np.where(left, t1, np.where(right, t3, mid))
    zc = np.clip(z, -wmax, wmax)
    if not with_slope:
        return zc
    inner = (mid > k1) & (mid < k2)
    moving = (left | right | inner) & (np.abs(z) < wmax) & (z != 0)
    return zc, int(moving.sum())


def _prox_leverage(v, a, p, rho, wmax, L, theta0=0.0):
    """Prox including the gross-leverage ball; returns ``(z, theta)``.

    ``|z(theta)|_1`` is continuous, piecewise linear and nonincreasing in the
    multiplier ``theta``, with slope ``-moving / rho``. A bracketed Newton
    iteration finds the root of ``|z|_1 = L``, usually in one or two steps
    from the previous multiplier.
    """
    z = _prox(v, a, p, 0.0, rho, wmax)
    if np.abs(z).sum() <= L:
        return z, 0.0
    lo = 0.0
    hi = rho * (np.abs(v).max() + wmax) + a.max() + 1.0
    theta = theta0 if 0.0 < theta0 < hi else 0.5 * hi
    ftol = 1e-13 * L
    best = None
    for _ in range(200):
        z, moving = _prox(v, a, p, theta, rho, wmax, with_slope=True)
        phi = np.abs(z).sum() - L
        if phi > 0:
            lo = theta
        else:
            hi = theta
            best = (z, theta)
            if phi >= -ftol:
                break
        if phi > 0 and phi <= ftol:
            best = (z, theta)
            break
        step = theta + phi * rho / moving if moving else None
        if step is None or not (lo < step < hi):
            step = 0.5 * (lo + hi)
        if hi - lo <= 1e-15 * max(hi, 1e-300):
            break
        theta = step
    if best is None:
        best = (_prox(v, a, p, hi, rho, wmax), hi)
    return best[0], float(best[1])


class _WStep:
    """Solver for ``min f(w) + rho/2 |w - c|^2  s.t.  Q w = 0``."""

    def __init__(self, problem: PortfolioProblem, rho: float):
        self.rho = rho
        self.solve = problem.risk.shifted_solver(problem.lambda_risk, rho)
        self.Q = problem.basis
        self.MiQt = self.solve(self.Q.T)
        self.S = scipy.linalg.cho_factor(self.Q @ self.MiQt)

    def __call__(self, rhs):
        x = self.solve(rhs)
        nu = scipy.linalg.cho_solve(self.S, self.Q @ x)
        return x - self.MiQt @ nu, nu


def _subgradient_bounds(problem: PortfolioProblem, w, theta, delta):
    """Interval ``[lo, hi]`` of the nonsmooth term's subdifferential at ``w``, per coordinate."""
    a = problem.tc_weights
    p = problem.prev_weights
    wmax = problem.w_max
    lo = np.zeros_like(w)
    hi = np.zeros_like(w)
    # turnover term
    at_p = np.abs(w - p) <= delta
    sp = np.sign(w - p)
    lo += np.where(at_p, -a, a * sp)
    hi += np.where(at_p, a, a * sp)
    # leverage term
    at_0 = np.abs(w) <= delta
    s0 = np.sign(w)
    lo += np.where(at_0, -theta, theta * s0)
    hi += np.where(at_0, theta, theta * s0)
    # box
    hi = np.where(np.abs(w - wmax) <= delta, np.inf, hi)
    lo = np.where(np.abs(w + wmax) <= delta, -np.inf, lo)
    return lo, hi


def verify_kkt(problem: PortfolioProblem, solution, tol: float = 1e-8) -> dict:
    """Maximum KKT violations of a candidate solution, using its stored multipliers.

    ``solution`` is a :class:`PortfolioSolution` or a ``(weights, nu, theta)``
    tuple. Returns a dict with ``stationarity`` (distance of
    ``-(grad f + Q'nu)`` from the subdifferential of the turnover, box and
    leverage terms), ``primal`` (worst constraint violation), ``dual``
    (negativity of the leverage multiplier) and ``complementarity``
    (``theta * leverage slack``). A coordinate within ``tol`` of a bound or
    kink is treated as sitting on it.
    """
    if isinstance(solution, PortfolioSolution):
        w, nu, theta = solution.weights, solution.nu, solution.theta
    else:
        w, nu, theta = solution
    w = np.asarray(w, dtype=np.float64)
    Q = problem.basis
    if nu is None:
        nu = np.zeros(Q.shape[0])
    r = -(problem.gradient(w) + Q.T @ nu)
    lo, hi = _subgradient_bounds(problem, w, theta, tol)
    stat = np.maximum(lo - r, 0.0) + np.maximum(r - hi, 0.0)
    res = problem.constraint_residuals(w)
    primal = max(
        [abs(res["sum_w"]), res["max_position_violation"], max(-res["leverage_slack"], 0.0)]
        + [abs(v) for v in res["sector_sums"].values()]
    )
    return {
        "stationarity": float(stat.max()) if len(stat) else 0.0,
        "primal": float(primal),
        "dual": float(max(0.0, -theta)),
        "complementarity": float(abs(theta * res["leverage_slack"])),
    }


def _kkt_ok(diag, tol):
    return all(v <= tol for v in diag.values())


def _polish(problem: PortfolioProblem, z, nu_ref, theta_ref, tol):
    """Solve the KKT system on the free set implied by ``z``; return a verified candidate or None."""
    a = problem.tc_weights
    p = problem.prev_weights
    wmax = problem.w_max
    L = problem.leverage
    Q = problem.basis
    m = Q.shape[0]
    lev_active = theta_ref > 0
    fixed = (np.abs(z) >= wmax) | ((a > 0) & (z == p)) | (lev_active & (z == 0))
    F = np.flatnonzero(~fixed)
    X = np.flatnonzero(fixed)
    wX = z[X]
    s1 = np.sign(z[F] - p[F])
    s2 = np.sign(z[F])
    lam = problem.lambda_risk
    risk = problem.risk
    BF = risk.loadings[F]
    SFF = BF @ risk.factor_cov @ BF.T + np.diag(risk.diag[F])
    SFX_wX = BF @ (risk.factor_cov @ (risk.loadings[X].T @ wX))
    nf = len(F)
    size = nf + m + (1 if lev_active else 0)
    K = np.zeros((size, size))
    rhs = np.zeros(size)
    K[:nf, :nf] = lam * SFF
    K[:nf, nf : nf + m] = Q[:, F].T
    K[nf : nf + m, :nf] = Q[:, F]
    rhs[:nf] = problem.mu_hat[F] - a[F] * s1 - lam * SFX_wX
    rhs[nf : nf + m] = -Q[:, X] @ wX
    if lev_active:
        K[:nf, -1] = s2
        K[-1, :nf] = s2
        rhs[-1] = L - np.abs(wX).sum()
    ref = np.concatenate([z[F], nu_ref, [theta_ref] if lev_active else []])
    x = None
    try:
        x = np.linalg.solve(K, rhs)
        if not np.all(np.isfinite(x)) or np.abs(K @ x - rhs).max() > 1e-9 * (1 + np.abs(rhs).max()):
            x = None
    except np.linalg.LinAlgError:
        x = None
    if x is None:
        U, s, Vt = np.linalg.svd(K)
        r = int(np.sum(s > 1e-12 * max(s[0], 1e-300))) if size else 0
        x = Vt[:r].T @ ((U[:, :r].T @ rhs) / s[:r])
        null = Vt[r:]
        x = x + null.T @ (null @ (ref - x))
    w = z.copy()
    w[F] = x[:nf]
    w[X] = wX
    nu = x[nf : nf + m]
    theta = float(x[-1]) if lev_active else 0.0
    diag = verify_kkt(problem, (w, nu, theta), tol)
    if _kkt_ok(diag, tol):
        return w, nu, theta, diag
    return None


def _initial_rho(problem: PortfolioProblem):
    d = problem.risk.diag
    B = problem.risk.loadings
    scale = float(np.mean(d) + np.mean(np.einsum("ij,jk,ik->i", B, problem.risk.factor_cov, B)))
    rho = problem.lambda_risk * scale
    if rho <= 0:
        rho = (np.abs(problem.mu_hat).max() + problem.tc_weights.max() + 1e-12) / problem.w_max
    return max(rho, 1e-12)


def solve(
    problem: PortfolioProblem,
    warm_start=None,
    tol: float = 1e-8,
    max_iter: int = 50_000,
    polish: bool = True,
) -> PortfolioSolution:
    """Solve one portfolio problem.

    Parameters
    ----------
    warm_start
        ``None``, a weight vector, or a previous :class:`PortfolioSolution`
        on the same universe (its full iterate state is reused).
    tol
        Absolute tolerance on ADMM residuals and on the KKT certificate.
    """
    if tol <= 0:
        raise ConfigError("tol must be > 0")
    n = problem.n
    a = problem.tc_weights
    p = problem.prev_weights
    wmax = problem.w_max
    L = problem.leverage
    warm = warm_start is not None
    rho = _initial_rho(problem)
    z = np.zeros(n)
    u = np.zeros(n)
    theta = 0.0
    nu = np.zeros(problem.basis.shape[0])
    if isinstance(warm_start, PortfolioSolution):
        st = warm_start.state
        if st and len(st["z"]) == n:
            z, u, rho, theta = st["z"].copy(), st["u"].copy(), st["rho"], st["theta"]
            nu = st["nu"].copy() if len(st["nu"]) == len(nu) else nu
        else:
            z = np.clip(np.asarray(warm_start.weights, dtype=np.float64), -wmax, wmax)
    elif warm:
        z = np.clip(np.asarray(warm_start, dtype=np.float64).ravel(), -wmax, wmax)
        if len(z) != n:
            raise ConfigError("warm start has the wrong length")
    wstep = _WStep(problem, rho)
    best = None
    last_key = None
    it = 0
    status = MAX_ITER
    w = z.copy()

    def try_polish():
        nonlocal best, last_key
        key = (
            (np.abs(z) >= wmax).tobytes(),
            ((a > 0) & (z == p)).tobytes(),
            (z == 0).tobytes(),
            np.sign(z - p).tobytes(),
            np.sign(z).tobytes(),
            theta > 0,
        )
        if key == last_key:
            return False
        last_key = key
        got = _polish(problem, z, nu, theta, tol)
        if got is not None:
            best = got
            return True
        return False

    if warm and polish and try_polish():
        status = OPTIMAL
    while status != OPTIMAL and it < max_iter:
        it += 1
        w, nu = wstep(problem.mu_hat + wstep.rho * (z - u))
        w_hat = ALPHA_RELAX * w + (1.0 - ALPHA_RELAX) * z
        z_old = z
        z, theta = _prox_leverage(w_hat + u, a, p, rho, wmax, L, theta)
        u = u + w_hat - z
        r_prim = np.abs(w - z).max()
        r_dual = rho * np.abs(z - z_old).max()
        if polish and it % POLISH_EVERY == 0 and try_polish():
            status = OPTIMAL
            break
        if r_prim <= tol and r_dual <= tol:
            diag = verify_kkt(problem, (z, nu, theta), tol)
            if _kkt_ok(diag, tol):
                best = (z.copy(), nu.copy(), theta, diag)
                status = OPTIMAL
                break
            if polish and try_polish():
                status = OPTIMAL
                break
        if it % RHO_EVERY == 0:
            pn = r_prim / (max(np.abs(w).max(), np.abs(z).max()) + 1e-30)
            dn = r_dual / (rho * np.abs(u).max() + 1e-30)
            ratio = np.sqrt(pn / dn) if dn > 0 and pn > 0 else 1.0
            if ratio > 5.0 or ratio < 0.2:
                new_rho = float(np.clip(rho * ratio, 1e-12, 1e12))
                u *= rho / new_rho
                rho = new_rho
                wstep = _WStep(problem, rho)
    if best is not None:
        wf, nuf, thetaf, diag = best
    else:
        # best iterate: z satisfies box and leverage; remove the equality residual
        Q = problem.basis
        wf = z - Q.T @ (Q @ z)
        nuf, thetaf = nu, theta
        diag = verify_kkt(problem, (wf, nuf, thetaf), tol)
    logger.debug("solve: status=%s iterations=%d rho=%.3g", status, it, rho)
    return PortfolioSolution(
        weights=wf,
        objective=problem.objective(wf),
        constraint_residuals=problem.constraint_residuals(wf),
        iterations=it,
        warm_started=warm,
        status=status,
        nu=nuf,
        theta=thetaf,
        kkt=diag,
        state={"z": z, "u": u, "rho": rho, "theta": theta, "nu": nu},
    )


def map_weights(prev_ids, prev_weights, ids):
    """Carry weights across a universe change: new names get 0, exiting names drop out."""
    lookup = dict(zip(prev_ids, np.asarray(prev_weights, dtype=np.float64)))
    return np.array([lookup.get(s, 0.0) for s in ids])


def rebalance_sequence(problems, warm_start_policy: str = "previous", tol: float = 1e-8, max_iter: int = 50_000):
    """Solve a time-ordered list of problems, optionally warm-starting from the previous solution.

    With ``previous`` the prior solution seeds the next solve: its full
    iterate state when the universe is unchanged, otherwise its weights
    mapped by security id (entering names at 0).
    """
    if warm_start_policy not in ("none", "previous"):
        raise ConfigError(f"unknown warm-start policy {warm_start_policy!r}")
    out = []
    prev = None
    prev_problem = None
    for prob in problems:
        warm = None
        if warm_start_policy == "previous" and prev is not None:
            same = prob.n == prev_problem.n and (
                prob.securities is None or prob.securities == prev_problem.securities
            )
            if same:
                warm = prev
            elif prob.securities is not None and prev_problem.securities is not None:
                warm = map_weights(prev_problem.securities, prev.weights, prob.securities)
        sol = solve(prob, warm_start=warm, tol=tol, max_iter=max_iter)
        out.append(sol)
        prev, prev_problem = sol, prob
    return out
