"""Exception types shared across the package."""


class TractError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TractError, ValueError):
    """Invalid configuration or non-conforming operand shapes."""


class ContractError(TractError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DataError(TractError, ValueError):
    """Malformed or non-finite input data."""


class TrainingError(TractError, RuntimeError):
    """Numerical failure during optimisation (non-finite loss or gradient)."""


class StageError(TractError):
    """Failure in one pipeline stage; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
