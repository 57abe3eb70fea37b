class PhyDrlError(Exception):
    pass


class DimensionMismatch(PhyDrlError):
    pass


class DegenerateRow(PhyDrlError):
    pass


class NotSymmetric(PhyDrlError):
    pass


class SingularP(PhyDrlError):
    pass


class Infeasible(PhyDrlError):
    pass


class NumericalFailure(PhyDrlError):
    pass


class NonFinite(PhyDrlError):
    pass


class NonFiniteState(NonFinite):
    pass


class NonFiniteLoss(PhyDrlError):
    def __init__(self, message: str, diagnostics: dict = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class EmptyBuffer(PhyDrlError):
    pass


class EmptyRegion(PhyDrlError):
    pass


class InsufficientData(PhyDrlError):
    pass


class ConfigError(PhyDrlError):
    pass


class CheckpointError(PhyDrlError):
    pass
