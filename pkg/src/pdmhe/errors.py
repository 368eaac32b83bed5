"""Exception types shared across the package."""


class PdmheError(Exception):
    """Base class for all estimation-pipeline errors."""


class DimensionMismatch(PdmheError):
    """Operands have incompatible shapes."""


class DomainError(PdmheError, ValueError):
    """A numeric argument lies outside its admissible domain."""


class AcceptanceTooLow(PdmheError):
    """Rejection sampler exhausted its retry budget (near measure-zero box)."""


class WindowUnderflow(PdmheError):
    """No estimation window can be formed at time t = 0."""


class Infeasible(PdmheError):
    """The constrained estimation problem has an empty feasible set."""


class SingularInnovation(PdmheError):
    """The innovation covariance R + C P C^T is numerically singular."""


class NotSPD(PdmheError):
    """A matrix expected to be symmetric positive-definite is not."""


class Diverged(PdmheError):
    """Training loss became non-finite."""


class InsufficientSamples(PdmheError):
    """A verification stream ended before the required sample count."""


class MaxIterations(PdmheError):
    """An iterative solver hit its iteration cap.

    Carries the best iterate found so far plus residual diagnostics so
    callers can decide whether the partial answer is usable.
    """

    def __init__(self, message, best=None, diagnostics=None):
        super().__init__(message)
        self.best = best
        self.diagnostics = dict(diagnostics or {})
