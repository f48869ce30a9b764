"""Exception types raised across the package.

Data problems subclass :class:`DataError`, configuration problems subclass
:class:`ConfigError`; the command-line entry point maps these to exit codes.
"""


class MaskGroupsError(Exception):
    pass


class DataError(MaskGroupsError, ValueError):
    pass


class ConfigError(MaskGroupsError, ValueError):
    pass


# mask-core
class SumMismatch(DataError):
    pass


class IllegalZeroRun(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyMask(DataError):
    pass


# metrics
class IndexOutOfRange(DataError, IndexError):
    pass


class IdMismatch(DataError):
    pass


# datagen / scenes
class SceneMismatch(DataError):
    pass


class SchemaError(DataError):
    pass


class SamplingExhausted(MaskGroupsError, RuntimeError):
    pass


# selector model
class TooManyCandidates(DataError):
    pass


class VocabMiss(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class SequenceTooLong(DataError):
    pass


class EmptyBatch(DataError):
    pass


class ConfigInvalid(ConfigError):
    pass
