"""Exception types shared across the package.

Exit-code mapping for the CLI lives in ``cli.py``; library code raises these
directly and never calls ``sys.exit``.
"""


class NkScopfError(Exception):
    """Base class for all package errors."""


class CaseFormatError(NkScopfError):
    """Case file could not be tokenized or has malformed tables."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CaseValidationError(NkScopfError):
    """Case parsed but violates a structural invariant."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


class ConvergenceError(NkScopfError):
    """An iterative solver exhausted its iteration budget.

    Carries the residual history so callers can inspect the stall.
    """

    def __init__(self, message, residual_history=()):
        self.residual_history = list(residual_history)
        super().__init__(message)


class SingularSystemError(NkScopfError):
    """A linear system factorization failed (structurally or numerically)."""


class InfeasibleError(NkScopfError):
    """No point satisfies the constraints; carries the worst violation."""

    def __init__(self, message, max_violation=None):
        self.max_violation = max_violation
        super().__init__(message)


class StaleSolutionError(NkScopfError):
    """A stored solution was presented together with inputs it was not solved for."""
