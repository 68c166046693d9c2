"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when inputs are structurally incompatible or invalid."""


class ContractError(ValueError):
    """Raised when an operation receives data outside its documented domain."""


class InvariantViolation(RuntimeError):
    """Raised when a computed object breaks a structural invariant."""


class SmallDivisorViolation(ArithmeticError):
    """A divisor fell below the small-divisor floor.

    Attributes
    ----------
    condition : str
        Which non-resonance condition failed (``"sd1"`` .. ``"sd4"`` or an
        assumption label such as ``"as4"``).
    mode : tuple of int
        Fourier mode ``k`` at which the failure occurred.
    blocks : tuple
        Block identifiers involved (empty for purely tangential conditions).
    divisor : float
        Magnitude of the offending divisor.
    """

    def __init__(self, condition, mode, blocks=(), divisor=0.0):
        self.condition = condition
        self.mode = tuple(int(x) for x in mode)
        self.blocks = tuple(blocks)
        self.divisor = float(divisor)
        super().__init__(
            f"{condition} violated at k={self.mode} blocks={self.blocks}: |divisor|={self.divisor:.3e}"
        )


class DivergenceWarning(RuntimeWarning):
    """Lie series terms did not decay below tolerance within the allowed order."""
