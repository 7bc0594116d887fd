"""Exception hierarchy.

``ConfigError`` and ``DataError`` map onto the CLI exit codes 2 and 3.
"""


class SemFusionError(Exception):
    pass


class ConfigError(SemFusionError):
    pass


class DataError(SemFusionError):
    pass


class NonPositiveDepth(SemFusionError, ValueError):
    pass


class ResolutionMismatch(DataError):
    pass


class ClassCountMismatch(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyMap(SemFusionError):
    pass


class LengthMismatch(SemFusionError, ValueError):
    pass


class TooLarge(SemFusionError):
    pass


class NoData(SemFusionError):
    pass


class IoFailure(DataError):
    pass


# probability-map files
class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class TrailingBytes(DataError):
    pass


class RowNotNormalised(DataError):
    pass


class ClassOutOfRange(DataError):
    pass


# sequences and trajectories
class MissingPair(DataError):
    pass


class UnreadableImage(DataError):
    pass


class MalformedLine(DataError):
    pass


class NonMonotonicTimestamps(DataError):
    pass


class BadQuaternion(DataError):
    pass


class DegenerateSpec(ConfigError):
    pass
