"""Exception types raised by the numerical routines."""


class MFLDAError(Exception):
    """Base class for all package errors."""


class NegativeDensity(MFLDAError):
    """A density value fell below the clipping tolerance."""


class JacobianDegenerate(MFLDAError):
    """The displacement map id + t*phi' is not a diffeomorphism."""


class NotConverged(MFLDAError):
    def __init__(self, residuals, iterations):
        self.residuals = tuple(residuals)
        self.iterations = iterations
        super().__init__(
            f"fixed point not reached after {iterations} iterations "
            f"(residuals mu={residuals[0]:.3e}, nu={residuals[1]:.3e})"
        )


class CertificationFailed(MFLDAError):
    def __init__(self, what, value, bound):
        self.what = what
        self.value = value
        self.bound = bound
        super().__init__(f"{what} = {value:.3e} exceeds {bound:.3e}")


class SupportMismatch(MFLDAError):
    """KL reference vanishes where the density does not."""


class GridTooLarge(MFLDAError):
    pass


class EigenNotConverged(MFLDAError):
    pass


class GibbsMismatch(MFLDAError):
    """Density is not the Gibbs measure of the supplied potential."""


class StepUnstable(MFLDAError):
    """Time step kept producing negative densities after all halvings."""


class InsufficientData(MFLDAError):
    pass


class NonPositiveEnergy(MFLDAError):
    pass
