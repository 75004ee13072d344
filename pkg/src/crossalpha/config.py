"""Run configuration: one dataclass per TOML section, every key documented and defaulted.

A config file is plain TOML::

    [synth]
    securities = 200
    strength = 0.3

    [optimizer]
    w_max = 0.02

Missing sections and keys take their defaults; unknown sections or keys are
rejected before anything runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def _key(default, help, **kw):
    return field(default=default, metadata={"help": help}, **kw)


def _list(default, help):
    return field(default_factory=lambda: list(default), metadata={"help": help})


@dataclass
class PanelSection:
    min_history: int = _key(250, "drop securities with fewer valid rows when loading a panel CSV")
    max_abs_daily_return: float = _key(0.20, "mask observations whose daily move exceeds this fraction")


@dataclass
class SynthSection:
    securities: int = _key(200, "number of simulated securities")
    days: int = _key(1000, "number of simulated trading days")
    strength: float = _key(0.3, "planted-signal strength in [0, 1]")
    horizon: int = _key(20, "planted-signal forward-return horizon (days)")
    industries: int = _key(5, "number of round-robin industry codes")
    industry_bias: float = _key(0.0, "scale of per-date industry offsets added to the planted factor")
    mu_low: float = _key(-0.05, "lower bound of annual drift draws")
    mu_high: float = _key(0.15, "upper bound of annual drift draws")
    sigma_low: float = _key(0.15, "lower bound of annual volatility draws")
    sigma_high: float = _key(0.45, "upper bound of annual volatility draws")
    start_date: str = _key("2010-01-04", "first simulated business day")


@dataclass
class FactorsSection:
    pipelines: list = _list(
        ['factor "mom_vol" = -cross_rank(delta(close, 20)) * cross_rank(volume / rolling_mean(volume, 20))',
         'factor "reversal5" = -(close / lag(close, 5) - 1)'],
        "factor pipeline statements in the expression grammar",
    )
    include_planted: bool = _key(True, "carry a planted factor file (factor.csv) into the factor set when present")
    chunk_days: int = _key(0, "evaluate in date chunks of this size (0 = whole panel)")


@dataclass
class NeutralizeSection:
    stages: list = _list(["industry", "size"], "stages in order, from industry, size, pca")
    alpha0: float = _key(1.0, "base neutralization strength")
    beta_vol: float = _key(0.0, "volatility-regime sensitivity of the strength")
    vol_window_short: int = _key(20, "short market-volatility window (days)")
    vol_window_long: int = _key(250, "long market-volatility window (days)")
    pca_k: int = _key(0, "principal components removed by the pca stage")
    robust: bool = _key(False, "Huber-weighted regressions instead of least squares")


@dataclass
class EvalSection:
    horizon: int = _key(1, "forward-return horizon for IC (days)")
    method: str = _key("spearman", "IC correlation: spearman or pearson")
    decay_horizons: list = _list([1, 5, 10, 20], "horizons for the IC decay profile")
    rolling_window: int = _key(60, "window for the rolling mean IC (dates)")
    min_abs_mean_ic: float = _key(0.0, "quality filter: minimum |mean IC|")
    min_ir: float = _key(0.0, "quality filter: minimum |IR|")
    min_positive_rate: float = _key(0.0, "quality filter: minimum share of same-sign IC dates")


@dataclass
class RiskSection:
    decay: float = _key(0.97, "EWMA decay for the factor covariance")
    epsilon: float = _key(1e-6, "ridge added to the covariance diagonal")
    window: int = _key(250, "estimation window for factor covariance and idiosyncratic variance (days)")
    idio_floor: float = _key(1e-8, "floor on idiosyncratic variances")
    factors: list = _list([], "risk-factor subset by name (empty = all factors)")


@dataclass
class CombinerSection:
    ridge_lambda: float = _key(1.0, "ridge penalty")
    horizon: int = _key(20, "forward-return target horizon (days)")


@dataclass
class OptimizerSection:
    lambda_risk: float = _key(5.0, "risk aversion")
    gamma_tc: float = _key(1.0, "transaction-cost aversion")
    cost: float = _key(0.0015, "per-name cost per unit turnover used in the objective")
    w_max: float = _key(0.02, "per-name absolute weight bound")
    leverage: float = _key(2.0, "gross leverage limit")
    sector_neutral: bool = _key(True, "zero net weight per industry")
    tol: float = _key(1e-8, "solver tolerance")
    max_iter: int = _key(50000, "solver iteration cap")
    warm_start: str = _key("previous", "warm-start policy: previous or none")


@dataclass
class BacktestSection:
    train_start: object = _key(0, "first training date (index or YYYY-MM-DD)")
    train_end: object = _key(-1, "last date of the initial training window (-1 = 62.5% of the sample)")
    test_end: object = _key(-1, "last test date (-1 = end of sample)")
    retrain_every: int = _key(60, "days between combiner refits")
    rebalance_every: int = _key(20, "days between rebalances")
    purge_gap: int = _key(-1, "days purged between training labels and decisions (-1 = combiner horizon)")
    cost_rate: float = _key(0.0, "cost charged per unit turnover at execution")
    train_window: int = _key(0, "rolling training window in days (0 = expanding)")
    periods_per_year: int = _key(252, "annualization factor")
    risk_free: float = _key(0.0, "per-period risk-free rate for the Sharpe ratio")


SECTIONS = {
    "panel": PanelSection,
    "synth": SynthSection,
    "factors": FactorsSection,
    "neutralize": NeutralizeSection,
    "eval": EvalSection,
    "risk": RiskSection,
    "combiner": CombinerSection,
    "optimizer": OptimizerSection,
    "backtest": BacktestSection,
}


@dataclass
class RunConfig:
    panel: PanelSection = field(default_factory=PanelSection)
    synth: SynthSection = field(default_factory=SynthSection)
    factors: FactorsSection = field(default_factory=FactorsSection)
    neutralize: NeutralizeSection = field(default_factory=NeutralizeSection)
    eval: EvalSection = field(default_factory=EvalSection)
    risk: RiskSection = field(default_factory=RiskSection)
    combiner: CombinerSection = field(default_factory=CombinerSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    backtest: BacktestSection = field(default_factory=BacktestSection)

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; identical configs hash identically."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _check_type(section, name, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int) and type(default) is int and name not in ("train_start", "train_end", "test_end"):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, (int, str)) and not isinstance(value, bool)
    if not ok:
        raise ConfigError(f"[{section}] {name}: expected {type(default).__name__}, got {value!r}")
    return value


def from_dict(doc: dict) -> RunConfig:
    cfg = RunConfig()
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        target = getattr(cfg, section)
        known = {f.name: f for f in dataclasses.fields(target)}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            setattr(target, key, _check_type(section, key, value, getattr(target, key)))
    validate(cfg)
    return cfg


def load_config(path=None) -> RunConfig:
    """Parse and validate a TOML config; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return from_dict(doc)


def validate(cfg: RunConfig):
    s = cfg.synth
    if cfg.panel.min_history < 1 or cfg.panel.max_abs_daily_return <= 0:
        raise ConfigError("[panel] needs min_history >= 1 and max_abs_daily_return > 0")
    if s.securities < 2 or s.days < 2:
        raise ConfigError("[synth] needs securities >= 2 and days >= 2")
    if s.mu_low > s.mu_high or s.sigma_low > s.sigma_high:
        raise ConfigError("[synth] degenerate parameter range (low > high)")
    if cfg.eval.method not in ("spearman", "pearson"):
        raise ConfigError("[eval] method must be spearman or pearson")
    if not (0 < cfg.risk.decay < 1):
        raise ConfigError("[risk] decay must lie in (0, 1)")
    if cfg.risk.epsilon < 0:
        raise ConfigError("[risk] epsilon must be >= 0")
    if cfg.combiner.ridge_lambda < 0:
        raise ConfigError("[combiner] ridge_lambda must be >= 0")
    if cfg.optimizer.warm_start not in ("previous", "none"):
        raise ConfigError("[optimizer] warm_start must be previous or none")
    if cfg.backtest.rebalance_every < 1 or cfg.backtest.retrain_every < 1:
        raise ConfigError("[backtest] rebalance_every and retrain_every must be >= 1")
    bad = [st for st in cfg.neutralize.stages if st not in ("industry", "size", "pca")]
    if bad:
        raise ConfigError(f"[neutralize] unknown stages {bad}")


def describe() -> str:
    """Every section, key, default and description, for ``--help``."""
    lines = ["config keys (TOML sections):"]
    for name, cls in SECTIONS.items():
        lines.append(f"  [{name}]")
        inst = cls()
        for f in dataclasses.fields(cls):
            lines.append(f"    {f.name} = {json.dumps(getattr(inst, f.name))}  # {f.metadata['help']}")
    return "\n".join(lines)
