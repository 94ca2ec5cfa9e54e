"""Exception hierarchy. Each top-level family maps to a CLI exit code."""


class EvsltError(Exception):
    exit_code = 1


class ConfigError(EvsltError):
    exit_code = 2


class DataError(EvsltError):
    exit_code = 3


class NumericError(EvsltError):
    exit_code = 4


class MalformedFile(DataError):
    pass


class OutOfBounds(DataError):
    pass


class NonMonotonicTime(DataError):
    pass


class EmptyStream(DataError):
    pass


class MissingSplit(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class IoFailure(DataError):
    pass


class NonScalarLoss(NumericError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class ShapeMismatch(NumericError):
    pass


class AllPadded(NumericError):
    pass


class DegenerateBatch(NumericError):
    pass


class SpatialUnderflow(ConfigError):
    pass


class TemporalUnderflow(ConfigError):
    pass


class UnknownMode(ConfigError):
    pass
