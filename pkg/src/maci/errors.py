"""Exception hierarchy shared by all modules.

Validation problems map to CLI exit status 2, numerical failures
(resolution guard, divergence, infeasible stage) map to exit status 3.
"""


class MaciError(Exception):
    exit_code = 1


class ValidationError(MaciError, ValueError):
    """Bad parameters, shapes or configuration."""

    exit_code = 2


class PreconditionError(ValidationError):
    """Input data violates a documented precondition."""


class ResolutionError(MaciError):
    """The grid cannot resolve the requested frequencies or scales."""

    exit_code = 3


class StageError(MaciError):
    """A stage could not be carried out (e.g. positivity lost)."""

    exit_code = 3


class FeasibilityError(StageError):
    """The error fields of the spiral stage are too large for the chosen sigma."""

    def __init__(self, message, measured=None):
        super().__init__(message)
        self.measured = measured


class DivergenceError(MaciError):
    """The outer iteration stopped reducing the deficit."""

    exit_code = 3

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
