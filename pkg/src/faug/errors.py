"""Exception hierarchy shared by every faug module."""


class FaugError(Exception):
    """Base class; the CLI maps each subclass to a one-line diagnostic."""


class ShapeMismatch(FaugError):
    pass


class NonFiniteInput(FaugError):
    pass


class NonFiniteResult(FaugError):
    pass


class UnknownPrimitive(FaugError):
    pass


class NotScalarLoss(FaugError):
    pass


class TapeConsumed(FaugError):
    pass


class InvalidNoiseParams(FaugError):
    pass


class InvalidSpec(FaugError):
    pass


class UnknownArchitecture(FaugError):
    pass


class UnknownLayer(FaugError):
    pass


class MissingRng(FaugError):
    pass


class DivergedTraining(FaugError):
    pass


class EmptySplit(FaugError):
    pass


class CheckpointIOError(FaugError, OSError):
    pass


class CorruptCheckpoint(FaugError):
    pass


class VersionMismatch(FaugError):
    pass


class ConfigInvalid(FaugError):
    pass


class InvalidSizes(FaugError):
    pass


class InvalidKernel(FaugError):
    pass


class NoEligibleSamples(FaugError):
    pass


class IncompatibleModels(FaugError):
    pass


class DegenerateLogits(FaugError):
    pass


class InvalidGrid(FaugError):
    pass


class InvalidLevels(FaugError):
    pass


class ReportIOError(FaugError, OSError):
    pass
