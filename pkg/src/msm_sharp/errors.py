"""Exception hierarchy shared across the package."""


class MSMError(Exception):
    """Base class for all package errors."""


class DataError(MSMError, ValueError):
    """Input data failed validation (exit code 2 at the CLI)."""


class NumericalError(MSMError, RuntimeError):
    """A fit or solver failed to produce a usable answer (exit code 3)."""


class SeparationError(NumericalError):
    """Logistic fit diverged, typically because the treatment is separable."""


class InfeasibleError(NumericalError):
    """A constrained weight program has no feasible point."""
