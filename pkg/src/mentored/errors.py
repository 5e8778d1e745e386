"""Exception hierarchy shared by every module.

Each family carries the CLI exit code it maps to.
"""


class MentoredError(Exception):
    exit_code = 1


class ConfigError(MentoredError):
    exit_code = 2


class DataError(MentoredError):
    exit_code = 3


class ShapeMismatch(MentoredError, ValueError):
    pass


class NonFiniteInput(MentoredError, FloatingPointError):
    pass


class NegativeStd(MentoredError, ValueError):
    pass


# net
class NonFiniteActivation(MentoredError, FloatingPointError):
    pass


class NonPositiveTemperature(MentoredError, ValueError):
    pass


class LabelOutOfRange(DataError, ValueError):
    pass


class StaleCache(MentoredError, RuntimeError):
    pass


class CorruptCheckpoint(DataError):
    pass


class ManifestMismatch(DataError):
    pass


class ArchMismatch(ConfigError):
    pass


# probe
class ProbeShapeError(ConfigError, ValueError):
    pass


class SpatialMismatch(ProbeShapeError):
    pass


class BatchMismatch(ProbeShapeError):
    pass


class NegativeWeight(MentoredError, ValueError):
    pass


# data
class BadMagic(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class Truncated(DataError):
    pass


class UnlabeledDataset(DataError):
    pass


class EmptyDataset(DataError):
    pass


# harness
class NotVisualizable(MentoredError, ValueError):
    pass


class UnrecoverableRun(MentoredError):
    exit_code = 4
