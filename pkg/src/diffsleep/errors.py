"""Exception hierarchy.

Every error raised by the package derives from :class:`DiffSleepError`; the
CLI maps the three middle-tier classes to exit codes.
"""


class DiffSleepError(Exception):
    pass


class ConfigError(DiffSleepError):
    pass


class DataError(DiffSleepError):
    pass


class NumericalError(DiffSleepError):
    pass


# edf ingestion
class MalformedHeader(DataError):
    pass


class TruncatedData(DataError):
    pass


class BadCalibration(DataError):
    pass


class UnrepresentableValue(DataError):
    pass


class OverlappingAnnotations(DataError):
    pass


class NonMultipleDuration(DataError):
    pass


class NoSleepFound(DataError):
    pass


class MissingChannel(DataError):
    pass


class WindowOutOfBounds(DataError):
    pass


class UnsupportedSamplingRate(DataError):
    pass


# scattering
class InvalidParameters(ConfigError):
    pass


class NonFiniteInput(DataError):
    pass


# diffusion
class DegenerateCloud(NumericalError):
    pass


class EigenFailure(NumericalError):
    pass


class SizeMismatch(DataError, ValueError):
    pass


# svm
class SingleClassInput(DataError, ValueError):
    pass


class NonFiniteFeature(DataError, ValueError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


# evaluation
class LengthMismatch(DataError, ValueError):
    pass


class EmptyMatrix(DataError, ValueError):
    pass


class InsufficientSubjects(DataError):
    pass


class TooFewPairs(DataError, ValueError):
    pass


class ZeroVariance(DataError, ValueError):
    pass


# pipeline
class MissingUpstream(DataError):
    pass


class CacheCorrupt(DataError):
    pass
