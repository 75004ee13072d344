"""Cross-sectional alpha research engine."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    CrossAlphaError,
    DomainError,
    EmptyUniverseError,
    InvalidHorizonError,
    InvalidWindowError,
    PanelParseError,
    UndefinedMetricError,
)
from .panel import PricePanel, ReturnPanel, forward_returns, load_panel, universe_mask, write_panel

__all__ = [
    "__version__",
    "ConfigError",
    "CrossAlphaError",
    "DomainError",
    "EmptyUniverseError",
    "InvalidHorizonError",
    "InvalidWindowError",
    "PanelParseError",
    "UndefinedMetricError",
    "PricePanel",
    "ReturnPanel",
    "forward_returns",
    "load_panel",
    "universe_mask",
    "write_panel",
]
