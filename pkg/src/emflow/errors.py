"""Exception types shared across the package."""


class EmflowError(Exception):
    """Base class for all package-specific errors."""


class DomainError(EmflowError):
    """Input outside the mathematical domain of a special function."""


class BracketError(EmflowError):
    """Root-finding bracket is invalid (wrong order or no sign change)."""


class ConvergenceError(EmflowError):
    """Iteration cap reached before the tolerance was met.

    Carries ``best`` (the best estimate found so far) when available.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DegenerateSecant(EmflowError):
    """Secant update hit equal function values (zero denominator)."""


class NonFiniteLoss(EmflowError):
    """A recorded computation produced NaN/Inf; names the first bad node."""


class NonFiniteError(EmflowError):
    """A transform produced a non-finite intermediate value."""


class ShapeError(EmflowError):
    """Array dimensions incompatible with the declared event layout."""


class CycleError(EmflowError):
    """Graph parent references do not admit a topological order."""


class ConfigError(EmflowError):
    """Invalid or unknown configuration value."""


class UnsupportedForGated(EmflowError):
    """Operation requires an ungated layer or a gate-compatible node."""


class PermError(EmflowError):
    """Permutation vector is not a bijection of the index range."""


class MissingArtifact(EmflowError):
    """A referenced run artifact does not exist on disk."""
