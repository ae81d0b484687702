"""Exception types shared across the package."""


class InvalidSpecError(ValueError):
    """Raised when an LSEM spec fails validation; carries every violation."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid LSEM spec: " + "; ".join(self.violations))


class SetupError(ValueError):
    """The LSEM does not have the shape a formula requires."""


class CorruptMomentsError(ArithmeticError):
    """Moment values violate an inequality every genuine moment set satisfies."""


class NoBridgeError(ArithmeticError):
    """No closed-form bridge exists (a structural coefficient is zero)."""


class PoleError(ArithmeticError):
    """A bias formula denominator vanishes; the bias is unbounded here."""

    def __init__(self, msg, location=None):
        self.location = location
        super().__init__(msg)


class SingularSystemError(ArithmeticError):
    """Linear system too ill-conditioned to trust."""

    def __init__(self, msg, cond=float("inf")):
        self.cond = cond
        super().__init__(f"{msg} (condition number {cond:.3g})")


class IdentificationError(SingularSystemError):
    """Sample instrument/feature cross-moment matrix is rank deficient."""


class EmptyArmError(ValueError):
    """One treatment arm has no observations."""


class DegenerateComparisonError(ValueError):
    """Bias comparison undefined because the proximal estimator is unbiased."""


class QuadratureError(ArithmeticError):
    """Quadrature rule too coarse for the requested accuracy."""
