"""Exception hierarchy. Each CLI-facing category maps to its own exit code."""


class SciError(Exception):
    exit_code = 1


class ShapeError(SciError, ValueError):
    exit_code = 2


class InvalidShapeError(ShapeError):
    pass


class InvalidRangeError(SciError, ValueError):
    exit_code = 2


class InvalidHyperparameterError(SciError, ValueError):
    exit_code = 2


class InvalidLabelError(SciError, ValueError):
    exit_code = 2


class ConfigError(SciError, ValueError):
    exit_code = 2


class InvalidParameterError(ConfigError):
    pass


class StratificationError(ConfigError):
    pass


class IngestError(SciError):
    exit_code = 3


class ManifestError(IngestError):
    pass


class TooSmallError(IngestError):
    pass


class DivergenceError(SciError, ArithmeticError):
    exit_code = 4

    def __init__(self, msg, epoch=None, batch=None):
        super().__init__(msg)
        self.epoch = epoch
        self.batch = batch


class RunIOError(SciError, OSError):
    exit_code = 5


class CorruptCheckpointError(SciError):
    exit_code = 6

    def __init__(self, msg, field=None):
        super().__init__(msg)
        self.field = field


class EvaluationError(SciError, ValueError):
    exit_code = 2
