"""Exception hierarchy shared by all modules."""


class IpepsError(Exception):
    """Base class for errors raised by :mod:`ipeps_ntu`."""


class ContractShapeError(IpepsError, ValueError):
    """Paired legs of a contraction have different dimensions."""


class ShapeError(IpepsError, ValueError):
    """Tensor legs do not match the expected bond or physical dimensions."""


class NumericError(IpepsError, ArithmeticError):
    """A factorization received non-finite input or produced non-finite output."""


class DegenerateMetricError(IpepsError, ArithmeticError):
    """All eigenvalues of a metric fall below the pseudo-inverse cutoff."""


class InvalidStateError(IpepsError, ValueError):
    """A state cannot be constructed, e.g. from a zero local vector."""


class BasisExpansionError(IpepsError, ArithmeticError):
    """A superoperator expanded in a Hermitian basis has imaginary entries."""


class MonotonicityError(IpepsError, ArithmeticError):
    """The truncation error increased between ALS sweeps (metric not PSD)."""


class StaleEnvironmentError(IpepsError, RuntimeError):
    """A CTMRG environment is unconverged or does not match the state."""


class DivergenceError(IpepsError, ArithmeticError):
    """CTMRG produced non-finite tensors."""


class IllConditionedStateError(IpepsError, ArithmeticError):
    """The norm contraction of a state vanishes."""


class SymmetryViolationError(IpepsError, ArithmeticError):
    """A purification lost its real (Hermitian) parametrization."""


class CrossoverNotBracketedError(IpepsError, ValueError):
    """The steepest magnetization slope lies on the boundary of the sampled grid."""


class FitError(IpepsError, RuntimeError):
    """The critical-temperature power-law fit did not converge."""
