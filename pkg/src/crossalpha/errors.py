"""Exception hierarchy.

Everything raised on purpose derives from :class:`CrossAlphaError`. The CLI maps
:class:`ConfigError` to exit code 2 and every other subclass to exit code 1.
"""


class CrossAlphaError(Exception):
    """Base class for domain errors."""


class ConfigError(CrossAlphaError, ValueError):
    """Invalid configuration or call parameters."""


class PanelParseError(CrossAlphaError):
    """Malformed panel or factor CSV."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class EmptyUniverseError(CrossAlphaError):
    """No security survived validation."""


class InvalidHorizonError(CrossAlphaError, ValueError):
    pass


class InvalidWindowError(CrossAlphaError, ValueError):
    pass


class DomainError(CrossAlphaError, ValueError):
    """Input outside the mathematical domain of an operation (e.g. log of a non-positive price)."""


class UndefinedMetricError(CrossAlphaError, ArithmeticError):
    """A statistic with a zero denominator (IR with flat IC, Sharpe with flat returns, ...)."""
