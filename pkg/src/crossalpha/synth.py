"""GBM price simulation, GBM calibration, and planted-signal synthetic markets.

Random numbers come from numpy's PCG64 bit generator. Each normal variate is
built from one raw 64-bit output: the top 53 bits give a uniform
``u = (k + 0.5) / 2**53`` in (0, 1), mapped through the inverse normal CDF
(``scipy.special.ndtri``). This avoids numpy's ziggurat sampler so the stream
can be reproduced from the PCG64 reference in any language.

Per-security streams are seeded with ``SeedSequence([seed, index, purpose])``
so securities can be simulated in any order or in parallel with identical
results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import ConfigError, DomainError
from .factors import FactorPanel
from .panel import PricePanel, forward_returns

TRADING_DAYS = 252
_STREAM_PRICE = 0
_STREAM_FACTOR = 1
_STREAM_INDUSTRY = 2


@dataclass(frozen=True)
class GbmParams:
    mu: float
    sigma: float
    dt: float = 1.0 / TRADING_DAYS
    s0: float = 100.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.dt <= 0:
            raise ConfigError("dt must be > 0")
        if self.s0 <= 0:
            raise ConfigError("s0 must be > 0")


@dataclass(frozen=True)
class PlantedSignalSpec:
    """Ground-truth factor recipe.

    ``industry_bias`` adds a per-date, per-industry offset of that scale,
    unrelated to returns, so neutralization has something to remove.
    """

    strength: float = 0.3
    horizon: int = 20
    seed: int = 0
    industry_bias: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.strength <= 1.0):
            raise ConfigError("strength must lie in [0, 1]")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.industry_bias < 0:
            raise ConfigError("industry_bias must be >= 0")


DEFAULT_RANGES = {
    "mu": (-0.05, 0.15),
    "sigma": (0.15, 0.45),
    "s0": (10.0, 100.0),
}


def make_rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def uniforms(rng: np.random.Generator, size) -> np.ndarray:
    raw = rng.bit_generator.random_raw(size)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(rng: np.random.Generator, size) -> np.ndarray:
    return ndtri(uniforms(rng, size))


def gbm_path(params: GbmParams, z: np.ndarray) -> np.ndarray:
    """Exact log-Euler path driven by the given standard normals."""
    drift = (params.mu - 0.5 * params.sigma**2) * params.dt
    shocks = params.sigma * np.sqrt(params.dt) * np.asarray(z, dtype=np.float64)
    logs = np.concatenate([[0.0], np.cumsum(drift + shocks)])
    return params.s0 * np.exp(logs)


def simulate_gbm(params: GbmParams, steps: int, seed: int) -> np.ndarray:
    """Simulate ``steps`` GBM increments; returns ``steps + 1`` prices starting at ``s0``."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    return gbm_path(params, normals(make_rng(seed), steps))


def estimate_gbm(path, dt: float = 1.0 / TRADING_DAYS) -> GbmParams:
    """Maximum-likelihood GBM drift and volatility from a price path.

    With ``m`` the mean and ``v`` the sample variance (``n - 1`` denominator)
    of the log returns: ``sigma^2 = v / dt`` and ``mu = m / dt + sigma^2 / 2``.
    """
    path = np.asarray(path, dtype=np.float64)
    if path.ndim != 1 or len(path) < 3:
        raise ConfigError("path needs at least 3 prices")
    if dt <= 0:
        raise ConfigError("dt must be > 0")
    if not np.all(path > 0):
        raise DomainError("prices must be strictly positive")
    lr = np.diff(np.log(path))
    m = lr.mean()
    v = lr.var(ddof=1)
    sigma2 = v / dt
    return GbmParams(mu=m / dt + 0.5 * sigma2, sigma=float(np.sqrt(sigma2)), dt=dt, s0=float(path[0]))


def _check_ranges(param_ranges):
    ranges = dict(DEFAULT_RANGES)
    for key, val in (param_ranges or {}).items():
        if key not in DEFAULT_RANGES:
            raise ConfigError(f"unknown parameter range {key!r}")
        lo, hi = (float(v) for v in val)
        if lo > hi:
            raise ConfigError(f"degenerate range for {key}: low {lo} > high {hi}")
        ranges[key] = (lo, hi)
    if ranges["sigma"][0] < 0 or ranges["s0"][0] <= 0:
        raise ConfigError("sigma range must be >= 0 and s0 range > 0")
    return ranges


def zscore_rows(x, mask):
    """Cross-sectional z-score (population std) per row over valid cells."""
    n = mask.sum(axis=1, keepdims=True)
    xs = np.where(mask, x, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = xs.sum(axis=1, keepdims=True) / n
        dev = np.where(mask, x - mean, 0.0)
        std = np.sqrt((dev * dev).sum(axis=1, keepdims=True) / n)
        z = dev / std
    ok = mask & (std > 0)
    return np.where(ok, z, np.nan), ok


def simulate_security(index: int, n_days: int, ranges, seed: int, dt: float):
    """Prices, volume and share count for one security from its own stream."""
    rng = make_rng(seed, index, _STREAM_PRICE)
    u = uniforms(rng, 3)
    mu = ranges["mu"][0] + (ranges["mu"][1] - ranges["mu"][0]) * u[0]
    sigma = ranges["sigma"][0] + (ranges["sigma"][1] - ranges["sigma"][0]) * u[1]
    s0 = ranges["s0"][0] + (ranges["s0"][1] - ranges["s0"][0]) * u[2]
    params = GbmParams(mu=mu, sigma=sigma, dt=dt, s0=s0)
    close = gbm_path(params, normals(rng, n_days - 1))
    z = normals(rng, n_days + 2)
    shares = np.exp(17.0 + 1.0 * z[0])
    base_volume = np.exp(13.0 + 0.5 * z[1])
    volume = base_volume * np.exp(0.3 * z[2:])
    return params, close, volume, shares


def planted_factor(panel: PricePanel, signal: PlantedSignalSpec) -> FactorPanel:
    """``strength * z(forward return) + sqrt(1 - strength^2) * noise`` (+ optional industry offsets)."""
    fwd = forward_returns(panel, signal.horizon)
    z, zmask = zscore_rows(fwd.returns, fwd.mask)
    T, N = panel.shape
    eps = np.empty((T, N))
    for j in range(N):
        eps[:, j] = normals(make_rng(signal.seed, j, _STREAM_FACTOR), T)
    s = signal.strength
    values = s * np.where(zmask, z, 0.0) + np.sqrt(1.0 - s * s) * eps
    lineage = [f"planted(strength={s}, horizon={signal.horizon}, seed={signal.seed})"]
    if signal.industry_bias > 0:
        J = panel.n_industries
        offsets = signal.industry_bias * normals(make_rng(signal.seed, _STREAM_INDUSTRY), T * J).reshape(T, J)
        values = values + offsets[:, panel.industry]
        lineage.append(f"industry_bias({signal.industry_bias})")
    return FactorPanel(name="planted", values=values, mask=zmask, lineage=tuple(lineage))


def generate_market(
    n_securities: int,
    n_days: int,
    param_ranges=None,
    signal: PlantedSignalSpec | None = None,
    seed: int = 0,
    n_industries: int = 5,
    dt: float = 1.0 / TRADING_DAYS,
    start_date: str = "2010-01-04",
):
    """Simulate an independent-GBM universe and a planted factor.

    Returns
    -------
    (PricePanel, FactorPanel)
        Industries are assigned round-robin over ``n_industries`` codes and
        dates are consecutive business days from ``start_date``.
    """
    signal = signal or PlantedSignalSpec()
    if n_securities < 2:
        raise ConfigError("need at least 2 securities")
    if n_days <= signal.horizon:
        raise ConfigError("n_days must exceed the signal horizon")
    if n_industries < 1:
        raise ConfigError("n_industries must be >= 1")
    ranges = _check_ranges(param_ranges)
    T, N = n_days, n_securities
    close = np.empty((T, N))
    volume = np.empty((T, N))
    shares = np.empty(N)
    for j in range(N):
        _, close[:, j], volume[:, j], shares[j] = simulate_security(j, T, ranges, seed, dt)
    opens = np.vstack([close[:1], close[:-1]])
    dates = np.busday_offset(np.datetime64(start_date, "D"), np.arange(T), roll="forward")
    panel = PricePanel(
        dates=dates,
        securities=[f"S{j:04d}" for j in range(N)],
        open=opens,
        high=np.maximum(opens, close),
        low=np.minimum(opens, close),
        close=close,
        volume=volume,
        market_cap=close * shares[None, :],
        industry=np.arange(N) % n_industries,
        mask=np.ones((T, N), dtype=bool),
    )
    return panel, planted_factor(panel, signal)
