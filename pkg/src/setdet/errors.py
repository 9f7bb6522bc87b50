"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class InfeasibleMatchingError(ValueError):
    """No finite-cost perfect matching exists.

    ``rows`` lists the ground-truth slots (or object columns) that could
    not be matched to an admissible prediction.
    """

    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = list(rows)


class ConfigError(ValueError):
    """Malformed, incomplete or unknown experiment configuration."""
