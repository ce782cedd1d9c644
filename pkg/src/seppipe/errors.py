"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """A caller violated an operation's precondition (bad shapes, ranges, files)."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values or hit a degenerate denominator."""


class Unsupported(RuntimeError):
    """The requested configuration is outside what this implementation handles."""
