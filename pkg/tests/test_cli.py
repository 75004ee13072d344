import dataclasses
import subprocess
import sys

import pytest

from crossalpha import __version__
from crossalpha.cli import main
from crossalpha.config import SECTIONS

SMALL = """
[panel]
min_history = 20

[synth]
securities = 60
days = 700

[backtest]
train_end = 399

[optimizer]
w_max = 0.05
"""

BUNDLE = ("equity.csv", "weights.csv", "metrics.csv", "attribution.csv", "manifest.txt")


def pipeline(root, cfg, seed=7, threads=1):
    common = ["--config", str(cfg), "--seed", str(seed), "--threads", str(threads)]
    panel = root / "panel.csv"
    steps = [
        ["synth", "--signal-strength", "0.3", "--out", str(panel)],
        ["factors", "--panel", str(panel), "--out", str(root / "raw")],
        ["neutralize", "--panel", str(panel), "--factors", str(root / "raw"), "--out", str(root / "neu")],
        ["eval", "--panel", str(panel), "--factors", str(root / "neu"), "--report", str(root / "report.csv")],
        ["backtest", "--panel", str(panel), "--factors", str(root / "neu"), "--out", str(root / "bt")],
    ]
    for s in steps:
        assert main(s[:1] + common + s[1:]) == 0, s[0]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.toml"
    cfg.write_text(SMALL)
    pipeline(root / "a", cfg)
    pipeline(root / "b", cfg, threads=4)
    return root, cfg


def test_version(capsys):
    assert main(["version"]) == 0
    assert capsys.readouterr().out.strip() == __version__
    assert len(__version__.split(".")) == 3


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "crossalpha.cli", "version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip() == __version__


def test_missing_config_exit_2(capsys, tmp_path):
    assert main(["backtest", "--config", str(tmp_path / "missing.toml"), "--panel", "p", "--factors", "f",
                 "--out", "o"]) == 2
    assert "missing.toml" in capsys.readouterr().err


def test_usage_errors_exit_2(capsys):
    assert main(["frobnicate"]) == 2
    assert main([]) == 2
    assert main(["synth"]) == 2
    assert main(["synth", "--seed", "notanumber", "--out", "x"]) == 2


def test_bad_config_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[optimizer]\nwmax = 0.1\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "p.csv")]) == 2
    assert "wmax" in capsys.readouterr().err
    assert not (tmp_path / "p.csv").exists()


def test_missing_input_exit_2(tmp_path):
    assert main(["eval", "--panel", str(tmp_path / "none.csv"), "--factors", str(tmp_path)]) == 2


def test_domain_error_exit_1(tmp_path, capsys):
    bad = tmp_path / "p.csv"
    bad.write_text("date,security_id,close,volume,market_cap,industry\n2020-01-02,A,-5,1,1,0\n")
    assert main(["factors", "--panel", str(bad), "--out", str(tmp_path / "f")]) == 1
    assert "p.csv" in capsys.readouterr().err


def test_help_lists_every_key(capsys):
    assert main(["backtest", "--help"]) == 0
    out = capsys.readouterr().out
    for cls in SECTIONS.values():
        for f in dataclasses.fields(cls):
            assert f"{f.name} = " in out
    assert main(["--help"]) == 0
    assert "[optimizer]" in capsys.readouterr().out


def test_end_to_end_deterministic(runs):
    root, _ = runs
    for name in BUNDLE:
        assert (root / "a" / "bt" / name).read_bytes() == (root / "b" / "bt" / name).read_bytes(), name
    for name in ("panel.csv", "factor.csv", "report.csv"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes(), name
    for f in (root / "a" / "neu").iterdir():
        assert f.read_bytes() == (root / "b" / "neu" / f.name).read_bytes(), f.name


def test_outputs_and_manifests(runs):
    root, cfg = runs
    a = root / "a"
    assert (a / "panel.manifest.txt").is_file()
    for d in ("raw", "neu", "bt"):
        text = (a / d / "manifest.txt").read_text()
        assert "seed=7" in text and "config_sha256=" in text and "crossalpha_version=" in text
    names = (a / "neu" / "factors.txt").read_text().split()
    assert names[0] == "planted" and len(names) == 3
    assert (a / "neu" / "neutralization_report.csv").is_file()
    metrics = dict(line.split(",") for line in (a / "bt" / "metrics.csv").read_text().splitlines()[1:])
    assert set(metrics) == {"annualized_return", "annualized_vol", "sharpe", "information_ratio", "calmar",
                            "max_drawdown", "mean_turnover"}


def test_different_seed_changes_results(runs, tmp_path):
    root, cfg = runs
    assert main(["synth", "--config", str(cfg), "--seed", "8", "--out", str(tmp_path / "panel.csv")]) == 0
    assert (tmp_path / "panel.csv").read_bytes() != (root / "a" / "panel.csv").read_bytes()


def test_optimize_command(runs, tmp_path, capsys):
    root, cfg = runs
    problem = root / "a" / "bt" / "last_problem"
    assert main(["optimize", "--config", str(cfg), "--mu", str(problem / "mu.csv"), "--risk", str(problem / "risk"),
                 "--out", str(tmp_path / "opt")]) == 0
    out = capsys.readouterr().out
    assert "status=optimal" in out
    lines = (tmp_path / "opt" / "weights.csv").read_text().splitlines()
    assert lines[0] == "security_id,weight"
    total = sum(float(line.split(",")[1]) for line in lines[1:])
    assert abs(total) <= 1e-8


def test_global_flags_before_or_after_command(runs, tmp_path):
    _, cfg = runs
    before, after = tmp_path / "before.csv", tmp_path / "after.csv"
    assert main(["--config", str(cfg), "--seed", "8", "synth", "--out", str(before)]) == 0
    assert main(["synth", "--config", str(cfg), "--seed", "8", "--out", str(after)]) == 0
    assert before.read_bytes() == after.read_bytes()
    # a flag after the command wins over the same flag before it
    assert main(["--seed", "3", "synth", "--config", str(cfg), "--seed", "8", "--out", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "c.csv").read_bytes() == after.read_bytes()
