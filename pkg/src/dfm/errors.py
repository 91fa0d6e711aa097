"""Exception types shared across the package."""


class DFMError(Exception):
    """Base class for all package errors."""


class InputDomainError(DFMError, ValueError):
    """An argument is outside the domain an operation accepts."""


class NumericDomainError(DFMError, FloatingPointError):
    """A non-finite value was encountered or produced."""


class TrajectoryDivergence(NumericDomainError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"trajectory diverged at integration step {step}")


class UndefinedScoreError(DFMError, ValueError):
    """A score was requested where it is not defined (e.g. no prior notes)."""


class ConfigError(DFMError, ValueError):
    """Run configuration could not be parsed or validated."""
