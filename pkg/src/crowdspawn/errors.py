"""Exception hierarchy.

Each class maps onto one failure mode a caller may want to handle on its own.
The CLI maps the three families (config, data, invariant) onto exit codes.
"""


class CrowdSpawnError(Exception):
    """Base class for all package errors."""


class ConfigError(CrowdSpawnError):
    pass


class ConfigInvalid(ConfigError):
    pass


class DataError(CrowdSpawnError):
    pass


class MalformedRow(DataError):
    pass


class NonMonotonicFrames(DataError):
    pass


class EmptyDataset(DataError):
    pass


class MalformedGrid(DataError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class ModelLoadFailure(DataError):
    pass


class ModelError(CrowdSpawnError):
    pass


class NoClustersFound(ModelError):
    pass


class UnusableSpawn(ModelError):
    pass


class OccupiedSampleExhausted(ModelError):
    pass


class NonFiniteLoss(ModelError, FloatingPointError):
    pass


class NoTrainingData(ModelError):
    pass


class NoDemonstrations(ModelError):
    pass


class InvalidOverlap(ModelError, ValueError):
    pass


class EmptySample(CrowdSpawnError, ValueError):
    pass


class InvariantViolation(CrowdSpawnError):
    pass
