"""Exception hierarchy.

Every error raised by the package derives from :class:`HiBehrtError`. The
three intermediate classes map onto CLI exit codes (config 2, data 3,
numeric 4).
"""


class HiBehrtError(Exception):
    exit_code = 1


class ConfigError(HiBehrtError):
    exit_code = 2


class DataError(HiBehrtError):
    exit_code = 3


class NumericError(HiBehrtError):
    exit_code = 4


# event data
class ValueOutOfRange(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class UnknownModality(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class BadRatios(ConfigError):
    pass


class EmptySequence(DataError):
    pass


# numerics / model
class ShapeMismatch(NumericError):
    pass


class NonFiniteValue(NumericError):
    pass


class AllMasked(NumericError):
    pass


class NonScalarLoss(NumericError):
    pass


class IdOutOfRange(DataError):
    pass


class NoValidSegments(DataError):
    pass


class ZeroVector(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass


class ConfigMismatch(ConfigError):
    pass


class StepOutOfRange(ConfigError):
    pass


# metrics
class SingleClass(DataError):
    pass


class NoPositives(DataError):
    pass


# checkpoints
class CheckpointError(DataError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


class ConfigInvalid(ConfigError):
    pass
