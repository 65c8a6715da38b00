"""Exception hierarchy shared across the package."""


class ReduiteError(Exception):
    """Base class for all package errors."""


class DomainError(ReduiteError):
    """Invalid grid, kernel, or subdomain (includes non-Greenian components)."""


class PreconditionError(ReduiteError):
    """An operation was called with arguments violating its contract."""


class FormatError(ReduiteError):
    """A domain or function file failed to parse.

    Carries the offending path and, when known, a 1-based line number.
    """

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class ConvergenceError(ReduiteError):
    """An iterative solver exhausted its budget; carries the last residual."""

    def __init__(self, message, residual=None, iterations=None):
        self.residual = residual
        self.iterations = iterations
        super().__init__(message)


class InternalConsistencyError(ReduiteError):
    """A post-verification failed; signals a solver bug, not bad input."""


class PropertyViolationError(ReduiteError):
    """An asserted mathematical property did not hold on the given instance."""
