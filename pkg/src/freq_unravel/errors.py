"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid user-facing configuration (CLI exit code 1)."""


class ContractViolation(ValueError):
    """A caller broke a documented precondition (shape mismatch, off-grid frequency, ...)."""


class NumericalFailure(RuntimeError):
    """Integration produced a non-finite value (CLI exit code 2)."""

    def __init__(self, message: str, t: float | None = None, seed: int | None = None):
        super().__init__(message)
        self.t = t
        self.seed = seed


class ValidationFailure(RuntimeError):
    """An invariant checked by the validation suite is violated (CLI exit code 3)."""


class TrialTerminated(Exception):
    """No further decay is possible from the current branch of a trial."""
