"""Exception hierarchy shared by every stage of the toolchain."""


class ApuError(Exception):
    """Base class for user-facing errors (bad input, infeasible request)."""


class ModelError(ApuError):
    pass


class ModelParseError(ModelError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class ShapeMismatchError(ModelError):
    pass


class UnknownLayerError(ModelError):
    pass


class MaskError(ApuError):
    pass


class QuantError(ApuError):
    pass


class TrainingDiverged(ApuError):
    pass


class MappingError(ApuError):
    pass


class ChecksumError(ApuError):
    pass


class SimulationFault(RuntimeError):
    """Internal inconsistency detected while simulating; carries the cycle."""

    def __init__(self, message, cycle=None):
        self.cycle = cycle
        where = f" at cycle {cycle}" if cycle is not None else ""
        super().__init__(f"{message}{where}")
