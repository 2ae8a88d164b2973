"""
errors.py - Exception types shared by the lab modules.
"""


class LabError(Exception):
    """Base class for every error raised on purpose by the lab."""


class InvalidInput(LabError, ValueError):
    """A rejected input. The message names the violated bound."""


class ConfigError(InvalidInput):
    """Unknown config key or out-of-range config value."""


class DivergenceError(LabError, RuntimeError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"path diverged at step {step}")


class AssumptionViolation(LabError):
    """The drift failed its assumption probe; downstream work is refused."""


class NonStationary(LabError):
    """A Markov chain failed its stationarity check after burn-in."""
