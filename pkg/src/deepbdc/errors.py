"""Exception hierarchy shared by every module of the package."""


class BdcError(Exception):
    """Base class for all package errors."""

    category = "error"


class InvalidInputError(BdcError, ValueError):
    """Input values are unusable (non-finite entries, empty arrays)."""

    category = "data"


class ShapeError(BdcError, ValueError):
    """Array shapes do not agree."""

    category = "data"


class SamplingError(BdcError, ValueError):
    """A dataset cannot satisfy the requested episode configuration."""

    category = "data"


class NumericError(BdcError, ArithmeticError):
    """A numerical routine failed (e.g. a matrix is not positive definite)."""

    category = "numeric"


class TrainingError(BdcError, RuntimeError):
    """Training diverged or received non-finite gradients.

    ``state`` holds the last parameters known to be finite, when available.
    """

    category = "numeric"

    def __init__(self, message, state=None, diagnostics=None):
        super().__init__(message)
        self.state = state
        self.diagnostics = diagnostics or {}


class ConfigError(BdcError, ValueError):
    """One or more configuration fields failed validation."""

    category = "config"

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
