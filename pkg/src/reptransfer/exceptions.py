class InputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class InvariantError(RuntimeError):
    """Raised when internal state is inconsistent (a bug, not bad input)."""


class DivergenceError(RuntimeError):
    """Raised when an optimisation produces a non-finite loss."""
