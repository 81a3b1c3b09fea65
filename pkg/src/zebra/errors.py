"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class ZebraError(Exception):
    exit_code = 1


class ShapeError(ZebraError, ValueError):
    """Tensor shapes or map geometry are inconsistent."""

    exit_code = 3


class CodecError(ZebraError, ValueError):
    exit_code = 4


class FormatError(CodecError):
    """Bad magic, unsupported version or dtype, or invalid header geometry."""


class TruncatedStreamError(CodecError):
    pass


class TrailingDataError(CodecError):
    pass


class UnrepresentableValueError(CodecError):
    pass


class ConfigError(ZebraError, ValueError):
    exit_code = 5


class DataError(ZebraError):
    exit_code = 6


class DivergenceError(ZebraError, FloatingPointError):
    exit_code = 7


class CheckpointError(ZebraError):
    exit_code = 8


class TopologyError(ZebraError, ValueError):
    """A channel mask cannot be applied to the model topology."""

    exit_code = 3
