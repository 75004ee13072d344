import dataclasses

import pytest

from crossalpha.config import SECTIONS, RunConfig, describe, from_dict, load_config
from crossalpha.errors import ConfigError


def test_defaults():
    assert load_config(None) == RunConfig()
    assert from_dict({}) == RunConfig()
    cfg = RunConfig()
    assert cfg.optimizer.cost == 0.0015 and cfg.optimizer.tol == 1e-8 and cfg.optimizer.max_iter == 50_000
    assert cfg.backtest.retrain_every == 60 and cfg.backtest.rebalance_every == 20
    assert cfg.combiner.horizon == 20


def test_toml_roundtrip(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[synth]\nsecurities = 50\nstrength = 0.5\n\n[optimizer]\nw_max = 0.03\nwarm_start = "none"\n'
                 '[neutralize]\nstages = ["industry"]\n')
    cfg = load_config(p)
    assert cfg.synth.securities == 50 and cfg.synth.strength == 0.5
    assert cfg.optimizer.w_max == 0.03 and cfg.optimizer.warm_start == "none"
    assert cfg.neutralize.stages == ["industry"]
    assert cfg.risk == RunConfig().risk


@pytest.mark.parametrize("doc", [
    {"nonsense": {}},
    {"synth": {"securities": 10, "colour": "red"}},
    {"synth": 3},
])
def test_unknown_rejected(doc):
    with pytest.raises(ConfigError):
        from_dict(doc)


@pytest.mark.parametrize("doc", [
    {"synth": {"securities": "ten"}},
    {"synth": {"securities": 10.5}},
    {"synth": {"securities": True}},
    {"neutralize": {"robust": 1}},
    {"optimizer": {"w_max": "0.02"}},
    {"neutralize": {"stages": "industry"}},
])
def test_type_errors(doc):
    with pytest.raises(ConfigError):
        from_dict(doc)


def test_int_accepted_for_float_and_dates_either_form():
    cfg = from_dict({"optimizer": {"leverage": 1}, "backtest": {"train_end": "2012-05-01", "test_end": 900}})
    assert cfg.optimizer.leverage == 1.0 and isinstance(cfg.optimizer.leverage, float)
    assert cfg.backtest.train_end == "2012-05-01" and cfg.backtest.test_end == 900


@pytest.mark.parametrize("doc", [
    {"risk": {"decay": 1.0}},
    {"risk": {"epsilon": -1.0}},
    {"eval": {"method": "kendall"}},
    {"neutralize": {"stages": ["industry", "beta"]}},
    {"optimizer": {"warm_start": "sometimes"}},
    {"backtest": {"rebalance_every": 0}},
    {"combiner": {"ridge_lambda": -0.1}},
    {"synth": {"sigma_low": 0.5, "sigma_high": 0.1}},
])
def test_validation(doc):
    with pytest.raises(ConfigError):
        from_dict(doc)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="missing.toml"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[synth\nsecurities = 3\n")
    with pytest.raises(ConfigError, match="bad.toml"):
        load_config(bad)


def test_describe_covers_every_key():
    text = describe()
    for name, cls in SECTIONS.items():
        assert f"[{name}]" in text
        for f in dataclasses.fields(cls):
            assert f"    {f.name} = " in text
    assert "w_max = 0.02" in text and "decay = 0.97" in text


def test_digest():
    a, b = RunConfig(), RunConfig()
    assert a.digest() == b.digest()
    b.synth.securities = 201
    assert a.digest() != b.digest()
