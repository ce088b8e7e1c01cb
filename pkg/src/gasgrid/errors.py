"""Exception hierarchy for gasgrid."""


class GasgridError(Exception):
    """Base class for all gasgrid errors."""


class NetworkError(GasgridError):
    """Malformed network topology or data."""


class DuplicateId(NetworkError):
    pass


class DanglingEndpoint(NetworkError):
    pass


class DisconnectedGraph(NetworkError):
    pass


class MissingFlow(NetworkError):
    pass


class MissingPressure(NetworkError):
    pass


class ModelError(GasgridError):
    """Physical model evaluated outside its domain of validity."""


class NonpositivePressure(ModelError):
    pass


class RadicandNonpositive(ModelError):
    """Algebraic pipe law invalid for this load; escalate the model."""


class CompressibilityOutOfRange(ModelError):
    pass


class SolverError(GasgridError):
    pass


class DimensionMismatch(SolverError):
    pass


class NewtonDiverged(SolverError):
    pass


class SingularJacobianTranspose(SolverError):
    pass


class BudgetUnreachable(SolverError):
    """Adaptive driver could not meet the error budget within the redo limit."""


class OptimizationError(GasgridError):
    pass


class MaxIterReached(OptimizationError):
    pass


class QPSingular(OptimizationError):
    pass


class LineSearchFailed(OptimizationError):
    pass


class FieldError(GasgridError):
    pass


class EmptyField(FieldError):
    pass


class InputError(GasgridError):
    """Bad input file or schema violation."""


class ParseError(InputError):
    pass


class UnitError(InputError):
    pass


class MissingTarget(InputError):
    pass


class IoError(GasgridError):
    pass
