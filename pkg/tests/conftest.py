"""Shared builders for the test suite."""

from pathlib import Path

import numpy as np
import pytest

from crossalpha.factors import FactorPanel
from crossalpha.panel import PricePanel

FIXTURES = Path(__file__).parent / "fixtures"


def make_panel(close, industry=None, volume=None, market_cap=None, mask=None, start="2020-01-01"):
    """PricePanel from a close matrix; everything else gets harmless defaults."""
    close = np.asarray(close, dtype=np.float64)
    if close.ndim == 1:
        close = close[:, None]
    T, N = close.shape
    if mask is None:
        mask = np.isfinite(close) & (close > 0)
    mask = np.asarray(mask, dtype=bool)
    fill = np.where(mask, close, np.nan)
    volume = np.ones((T, N)) * 1000.0 if volume is None else np.asarray(volume, dtype=np.float64)
    market_cap = fill * 1e6 if market_cap is None else np.asarray(market_cap, dtype=np.float64)
    dates = np.busday_offset(np.datetime64(start, "D"), np.arange(T), roll="forward")
    return PricePanel(
        dates=dates,
        securities=[f"S{j}" for j in range(N)],
        open=fill,
        high=fill,
        low=fill,
        close=fill,
        volume=np.where(mask, volume, np.nan),
        market_cap=np.where(mask, market_cap, np.nan),
        industry=np.zeros(N, dtype=int) if industry is None else np.asarray(industry),
        mask=mask,
    )


def random_panel(T, N, seed=0, n_industries=5, missing=0.0):
    rng = np.random.default_rng(seed)
    close = 50.0 * np.exp(np.cumsum(0.02 * rng.standard_normal((T, N)), axis=0))
    mask = rng.random((T, N)) >= missing
    volume = np.exp(10 + rng.standard_normal((T, N)))
    mcap = close * np.exp(15 + 2 * rng.standard_normal(N))[None, :]
    return make_panel(close, industry=np.arange(N) % n_industries, volume=volume, market_cap=mcap, mask=mask)


def factor(values, mask=None, name="f"):
    values = np.asarray(values, dtype=np.float64)
    if mask is None:
        mask = np.isfinite(values)
    return FactorPanel(name, values, mask)


@pytest.fixture
def mini_panel_path():
    return FIXTURES / "mini_panel.csv"


# acceptance criteria report: one line per criterion at the end of the run
ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    def record(number, title, passed, detail=""):
        ACCEPTANCE[number] = (title, bool(passed), detail)
        print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
