"""``crossalpha`` command line.

Exit codes: 0 success, 1 domain error (bad data, undefined results),
2 usage or configuration error. Logs go to standard error at the level named
by ``CROSSALPHA_LOG`` (error, warn, info, debug); data goes only to the
declared output paths.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .backtest import BacktestConfig, attribution_report, run_backtest, write_bundle, write_manifest
from .config import RunConfig, describe, load_config
from .errors import ConfigError, CrossAlphaError
from .evaluation import evaluate_factor, quality_filter, write_reports_csv
from .factors import read_factor_csv, write_factor_csv
from .neutralize import NeutralizationConfig, NeutralizationReport, neutralize_factors
from .optimizer import PortfolioProblem, solve
from .panel import load_panel, universe_mask, write_panel
from .pipeline import evaluate, evaluate_chunked
from .risk import RiskModel
from .synth import PlantedSignalSpec, generate_market

logger = logging.getLogger("crossalpha")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
FACTOR_INDEX = "factors.txt"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _setup_logging():
    level = LOG_LEVELS.get(os.environ.get("CROSSALPHA_LOG", "warn").lower(), logging.WARNING)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("crossalpha")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def _threads(n):
    return n if n and n > 0 else (os.cpu_count() or 1)


def _pmap(fn, items, threads):
    """Order-preserving map; thread count changes speed only."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- io helpers


def _load_panel(path, cfg: RunConfig):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"panel file not found: {p}")
    panel = load_panel(p, min_history=cfg.panel.min_history)
    return panel.with_mask(universe_mask(panel, cfg.panel.max_abs_daily_return))


def write_factor_dir(factors, panel, out_dir):
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    for f in factors:
        write_factor_csv(f, panel, d / f"{f.name}.csv")
    (d / FACTOR_INDEX).write_text("".join(f"{f.name}\n" for f in factors))


def read_factor_dir(in_dir, panel):
    d = Path(in_dir)
    if not d.is_dir():
        raise UsageError(f"factor directory not found: {d}")
    index = d / FACTOR_INDEX
    if index.is_file():
        names = [n.strip() for n in index.read_text().splitlines() if n.strip()]
    else:
        names = sorted(p.stem for p in d.glob("*.csv"))
    if not names:
        raise UsageError(f"no factor files in {d}")
    return [read_factor_csv(d / f"{n}.csv", panel, name=n) for n in names]


# ---------------------------------------------------------------- commands


def cmd_version(args, cfg):
    print(__version__)
    return 0


def cmd_synth(args, cfg: RunConfig):
    s = cfg.synth
    n = args.securities if args.securities is not None else s.securities
    days = args.days if args.days is not None else s.days
    strength = args.signal_strength if args.signal_strength is not None else s.strength
    signal = PlantedSignalSpec(strength=strength, horizon=s.horizon, seed=args.seed, industry_bias=s.industry_bias)
    ranges = {"mu": (s.mu_low, s.mu_high), "sigma": (s.sigma_low, s.sigma_high)}
    panel, factor = generate_market(n, days, ranges, signal, seed=args.seed, n_industries=s.industries, start_date=s.start_date)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_panel(panel, out)
    factor_out = Path(args.factor_out) if args.factor_out else out.with_name("factor.csv")
    write_factor_csv(factor, panel, factor_out)
    write_manifest(out.with_name(out.stem + ".manifest.txt"), cfg, args.seed, {"command": "synth"})
    logger.info("wrote %s and %s", out, factor_out)
    return 0


def cmd_factors(args, cfg: RunConfig):
    panel = _load_panel(args.panel, cfg)
    specs = cfg.factors.pipelines
    if cfg.factors.chunk_days > 0:
        factors = evaluate_chunked(panel, specs, cfg.factors.chunk_days)
    else:
        factors = evaluate(panel, specs)
    planted = Path(args.planted) if args.planted else Path(args.panel).with_name("factor.csv")
    if cfg.factors.include_planted and planted.is_file():
        factors = [read_factor_csv(planted, panel, name="planted")] + factors
    write_factor_dir(factors, panel, args.out)
    write_manifest(Path(args.out) / "manifest.txt", cfg, args.seed, {"command": "factors"})
    return 0


def _neutralization_config(cfg: RunConfig):
    n = cfg.neutralize
    return NeutralizationConfig(
        alpha0=n.alpha0, beta_vol=n.beta_vol, vol_window_short=n.vol_window_short,
        vol_window_long=n.vol_window_long, stages=tuple(n.stages), pca_k=n.pca_k, robust=n.robust,
    )


def cmd_neutralize(args, cfg: RunConfig):
    ncfg = _neutralization_config(cfg)
    panel = _load_panel(args.panel, cfg)
    factors = read_factor_dir(args.factors, panel)
    if "pca" in ncfg.stages:
        out, report = neutralize_factors(factors, panel, ncfg)
    else:
        # one merge path for every thread count keeps the report order fixed
        parts = _pmap(lambda f: neutralize_factors([f], panel, ncfg), factors, args.threads)
        out = [p[0][0] for p in parts]
        report = NeutralizationReport()
        for i, (_, rep) in enumerate(parts):
            if i:
                rep.records = [r for r in rep.records if r[1] != "strength"]
            report.extend(rep)
    write_factor_dir(out, panel, args.out)
    report.write_csv(Path(args.out) / "neutralization_report.csv", panel.dates)
    write_manifest(Path(args.out) / "manifest.txt", cfg, args.seed, {"command": "neutralize"})
    return 0


def cmd_eval(args, cfg: RunConfig):
    e = cfg.eval
    horizon = args.horizon if args.horizon is not None else e.horizon
    method = args.method or e.method
    panel = _load_panel(args.panel, cfg)
    factors = read_factor_dir(args.factors, panel)
    reports = _pmap(
        lambda f: evaluate_factor(f, panel, horizon, method, e.decay_horizons, e.rolling_window),
        factors, args.threads,
    )
    if args.report:
        report_path = Path(args.report)
    else:
        report_path = Path(args.out or ".") / "report.csv"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    write_reports_csv(reports, report_path)
    passed = quality_filter(reports, e.min_abs_mean_ic, e.min_ir, e.min_positive_rate)
    for r in reports:
        mark = "pass" if r.name in passed else "fail"
        print(f"{r.name}: mean_ic={r.mean_ic:.4f} ir={r.ir:.3f} positive_rate={r.positive_ic_rate:.3f} [{mark}]")
    return 0


def cmd_backtest(args, cfg: RunConfig):
    panel = _load_panel(args.panel, cfg)
    factors = read_factor_dir(args.factors, panel)
    bcfg = BacktestConfig.from_run_config(cfg)
    result = run_backtest(panel, factors, bcfg)
    attribution = attribution_report(result, factors)
    write_bundle(result, args.out, cfg, args.seed, attribution, {"command": "backtest"})
    for key in sorted(result.metrics):
        print(f"{key}={result.metrics[key]!r}")
    return 0


def _read_mu(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"mu file not found: {p}")
    with p.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "security_id" not in rows[0] or "mu" not in rows[0]:
        raise ConfigError(f"{p}: need columns security_id,mu")
    ids = [r["security_id"] for r in rows]
    mu = np.array([float(r["mu"]) for r in rows])
    sector = np.array([int(r["sector"]) for r in rows]) if "sector" in rows[0] else None
    prev = np.array([float(r["prev_weight"]) for r in rows]) if "prev_weight" in rows[0] else None
    cost = np.array([float(r["cost"]) for r in rows]) if "cost" in rows[0] else None
    return ids, mu, sector, prev, cost


def cmd_optimize(args, cfg: RunConfig):
    o = cfg.optimizer
    ids, mu, sector, prev, cost = _read_mu(args.mu)
    if not Path(args.risk).is_dir():
        raise UsageError(f"risk directory not found: {args.risk}")
    risk, risk_ids = RiskModel.load(args.risk)
    pos = {s: j for j, s in enumerate(risk_ids)}
    missing = [s for s in ids if s not in pos]
    if missing:
        raise ConfigError(f"risk model lacks securities {missing[:5]}")
    risk = risk.submodel([pos[s] for s in ids])
    problem = PortfolioProblem(
        mu_hat=mu, risk=risk, lambda_risk=o.lambda_risk, gamma_tc=o.gamma_tc,
        costs=cost if cost is not None else o.cost, prev_weights=prev, w_max=o.w_max,
        leverage=o.leverage, sectors=sector if o.sector_neutral else None, securities=ids,
    )
    sol = solve(problem, tol=o.tol, max_iter=o.max_iter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "weights.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["security_id", "weight"])
        for sid, wt in zip(ids, sol.weights):
            w.writerow([sid, repr(float(wt))])
    write_manifest(out / "manifest.txt", cfg, args.seed, {"command": "optimize"})
    print(f"status={sol.status}")
    print(f"objective={sol.objective!r}")
    print(f"iterations={sol.iterations}")
    print(f"gross={float(np.abs(sol.weights).sum())!r}")
    print(f"max_constraint_residual={sol.max_constraint_residual!r}")
    for key, val in (sol.kkt or {}).items():
        print(f"kkt_{key}={val!r}")
    return 0


# ---------------------------------------------------------------- parser


def _global_flags(suppress):
    """Flags accepted before or after the subcommand.

    The subcommand copy uses suppressed defaults so it never overwrites a
    value given before the subcommand.
    """
    def default(v):
        return argparse.SUPPRESS if suppress else v

    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=default(None), metavar="PATH", help="TOML config file (see keys below)")
    p.add_argument("--seed", type=int, default=default(0), metavar="U64", help="single source of randomness (default 0)")
    p.add_argument("--threads", type=int, default=default(0), metavar="N", help="worker threads (default: all cores)")
    return p


def build_parser():
    common = _global_flags(suppress=True)
    epilog = describe()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="crossalpha", description="Cross-sectional alpha research engine.", epilog=epilog,
                     formatter_class=fmt, parents=[_global_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", metavar="{synth,factors,neutralize,eval,backtest,optimize,version}", parser_class=_Parser)

    def add(name, help, func):
        p = sub.add_parser(name, help=help, parents=[common], epilog=epilog, formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    add("version", "print the version", cmd_version)

    p = add("synth", "simulate a GBM market with a planted factor", cmd_synth)
    p.add_argument("--securities", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--signal-strength", type=float)
    p.add_argument("--out", required=True, metavar="PANEL_CSV", help="panel CSV path")
    p.add_argument("--factor-out", metavar="CSV", help="planted factor CSV (default: factor.csv next to the panel)")

    p = add("factors", "evaluate factor pipelines over a panel", cmd_factors)
    p.add_argument("--panel", required=True)
    p.add_argument("--planted", metavar="CSV", help="planted factor CSV to include (default: factor.csv next to the panel)")
    p.add_argument("--out", required=True, metavar="DIR")

    p = add("neutralize", "industry/size/PCA neutralization", cmd_neutralize)
    p.add_argument("--panel", required=True)
    p.add_argument("--factors", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")

    p = add("eval", "IC / IR factor evaluation", cmd_eval)
    p.add_argument("--panel", required=True)
    p.add_argument("--factors", required=True, metavar="DIR")
    p.add_argument("--horizon", type=int)
    p.add_argument("--method", choices=("spearman", "pearson"))
    p.add_argument("--report", metavar="CSV")
    p.add_argument("--out", metavar="DIR")

    p = add("backtest", "walk-forward backtest", cmd_backtest)
    p.add_argument("--panel", required=True)
    p.add_argument("--factors", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")

    p = add("optimize", "solve one portfolio problem", cmd_optimize)
    p.add_argument("--mu", required=True, metavar="CSV", help="security_id,mu[,sector,prev_weight,cost]")
    p.add_argument("--risk", required=True, metavar="DIR", help="loadings.csv, factor_cov.csv, idio_var.csv")
    p.add_argument("--out", required=True, metavar="DIR")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            raise UsageError("crossalpha: a subcommand is required")
        args.threads = _threads(args.threads)
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CrossAlphaError, ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
