import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_panel
from crossalpha.errors import EmptyUniverseError, InvalidHorizonError, PanelParseError
from crossalpha.panel import (
    ColumnSpec,
    forward_returns,
    load_panel,
    trailing_returns,
    universe_mask,
    write_panel,
)

HEADER = "date,security_id,open,high,low,close,volume,market_cap,industry\n"


def _csv(tmp_path, rows, name="p.csv", header=HEADER):
    p = tmp_path / name
    p.write_text(header + "".join(r + "\n" for r in rows))
    return p


def _rows(closes, sid="A", ind=0):
    return [f"2024-01-0{i + 2},{sid},{c},{c},{c},{c},100,1000,{ind}" for i, c in enumerate(closes)]


def test_three_row_csv(tmp_path):
    p = load_panel(_csv(tmp_path, _rows([10, 11, 12])), min_history=1)
    assert p.shape == (3, 1)
    assert p.mask.all()
    np.testing.assert_array_equal(p.close[:, 0], [10, 11, 12])


def test_negative_close_masked(tmp_path):
    p = load_panel(_csv(tmp_path, _rows([10, -5, 12])), min_history=1)
    assert p.mask[:, 0].tolist() == [True, False, True]
    assert np.isnan(p.close[1, 0])


def test_mini_fixture(mini_panel_path):
    p = load_panel(mini_panel_path, min_history=20)
    assert p.shape == (20, 5)
    assert p.industry.tolist() == [0, 0, 1, 1, 2]
    assert p.securities == ("AAA", "BBB", "CCC", "DDD", "EEE")
    assert p.mask.all()
    # hand count from the first data row
    assert p.close[0, 0] == 10.5 and p.market_cap[0, 4] == 250_000_000


def test_min_history_drops(mini_panel_path):
    with pytest.raises(EmptyUniverseError):
        load_panel(mini_panel_path, min_history=21)
    # the default one-year filter rejects a 20-day file outright
    with pytest.raises(EmptyUniverseError):
        load_panel(mini_panel_path)


def test_parse_error_reports_line(tmp_path):
    rows = _rows([10, 11, 12])
    rows[1] = rows[1].replace(",11,11,11,11,", ",11,abc,11,11,")
    with pytest.raises(PanelParseError) as exc:
        load_panel(_csv(tmp_path, rows), min_history=1)
    assert exc.value.line == 3
    assert str(exc.value).startswith(f"{tmp_path / 'p.csv'}:3:")


def test_missing_column_and_wrong_width(tmp_path):
    with pytest.raises(PanelParseError):
        load_panel(_csv(tmp_path, ["2024-01-02,A,1,1,1,1,1"], header="date,security_id,open,high,low,close,volume\n"))
    with pytest.raises(PanelParseError) as exc:
        load_panel(_csv(tmp_path, _rows([10]) + ["2024-01-03,A,1"]), min_history=1)
    assert exc.value.line == 3


def test_unknown_column_warns(tmp_path, caplog):
    header = HEADER.strip() + ",extra\n"
    rows = [r + ",x" for r in _rows([10, 11])]
    p = load_panel(_csv(tmp_path, rows, header=header), min_history=1)
    assert p.shape == (2, 1)
    assert "extra" in caplog.text


def test_custom_column_spec(tmp_path):
    header = "d,id,o,h,l,c,v,m,sector\n"
    p = load_panel(_csv(tmp_path, _rows([5, 6]), header=header),
                   ColumnSpec("d", "id", "o", "h", "l", "c", "v", "m", "sector"), min_history=1)
    assert p.close[:, 0].tolist() == [5, 6]


def test_roundtrip_bit_exact(tmp_path, mini_panel_path):
    p = load_panel(mini_panel_path, min_history=1)
    rng = np.random.default_rng(3)
    noisy = make_panel(p.close * np.exp(rng.standard_normal(p.shape) * 1e-3), industry=p.industry)
    out = tmp_path / "rt.csv"
    write_panel(noisy, out)
    back = load_panel(out, min_history=1)
    for f in ("close", "volume", "market_cap"):
        np.testing.assert_array_equal(getattr(back, f), getattr(noisy, f))
    write_panel(back, tmp_path / "rt2.csv")
    assert out.read_bytes() == (tmp_path / "rt2.csv").read_bytes()


@pytest.mark.parametrize(
    "closes,h,expected",
    [([100, 110], 1, [0.10]), ([50, 50, 50], 1, [0.0, 0.0]), ([100, 120, 90], 2, [-0.10])],
)
def test_forward_return_examples(closes, h, expected):
    r = forward_returns(make_panel(closes), h)
    np.testing.assert_allclose(r.returns[: len(expected), 0], expected, atol=1e-15)
    assert not r.mask[-h:].any()
    assert r.alignment == "forward"


def test_invalid_horizon():
    with pytest.raises(InvalidHorizonError):
        forward_returns(make_panel([1.0, 2.0]), 2)


def test_trailing_is_shifted_forward():
    p = make_panel([[100, 10], [110, 11], [121, 9]])
    fwd, trl = forward_returns(p, 1), trailing_returns(p, 1)
    np.testing.assert_array_equal(trl.returns[1:], fwd.returns[:-1])
    assert not trl.mask[0].any()


@pytest.mark.parametrize("closes,kept", [([100, 130], [True, False]), ([100, 110], [True, True])])
def test_universe_mask_examples(closes, kept):
    assert universe_mask(make_panel(closes), 0.20)[:, 0].tolist() == kept


def test_universe_mask_all_missing_column():
    close = np.array([[100.0, np.nan], [101.0, np.nan]])
    m = universe_mask(make_panel(close), 0.2)
    assert not m[:, 1].any() and m[:, 0].all()


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-0.3, 0.3), min_size=6, max_size=30),
    st.integers(1, 5),
)
def test_forward_return_compounds_daily(daily, h):
    close = 100.0 * np.cumprod(np.r_[1.0, 1.0 + np.asarray(daily)])
    if h >= len(close):
        return
    p = make_panel(close)
    d = forward_returns(p, 1).returns[:, 0]
    fh = forward_returns(p, h).returns[:, 0]
    for t in range(len(close) - h):
        assert abs(fh[t] - (np.prod(1.0 + d[t : t + h]) - 1.0)) <= 1e-12


def test_dropping_masked_security_does_not_change_others():
    rng = np.random.default_rng(0)
    close = 100 * np.exp(np.cumsum(0.01 * rng.standard_normal((30, 4)), axis=0))
    mask = np.ones_like(close, dtype=bool)
    mask[:, 2] = False
    full = make_panel(close, mask=mask)
    sub = full.select(cols=[0, 1, 3])
    np.testing.assert_array_equal(forward_returns(full, 3).returns[:, [0, 1, 3]], forward_returns(sub, 3).returns)
    np.testing.assert_array_equal(universe_mask(full)[:, [0, 1, 3]], universe_mask(sub))


def test_panel_invariants_rejected():
    with pytest.raises(ValueError):
        make_panel([[1.0, 2.0]], industry=[0])
    p = make_panel([[1.0, 2.0], [1.0, 2.0]])
    with pytest.raises(ValueError):
        type(p)(p.dates[::-1], p.securities, p.open, p.high, p.low, p.close, p.volume, p.market_cap, p.industry, p.mask)
    with pytest.raises(ValueError):
        type(p)(p.dates, ("a", "a"), p.open, p.high, p.low, p.close, p.volume, p.market_cap, p.industry, p.mask)
    assert not p.close.flags.writeable
