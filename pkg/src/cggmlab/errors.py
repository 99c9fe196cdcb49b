"""Exception hierarchy shared by every cggmlab module."""


class CggmError(Exception):
    """Base class for all errors raised by cggmlab."""


class ShapeError(CggmError, ValueError):
    """Operand shapes are incompatible or a shape is invalid."""


class ContractError(CggmError, RuntimeError):
    """An operation was called in a state that violates its preconditions."""


class NumericError(CggmError, ArithmeticError):
    """Non-finite input where a finite value is required."""


class ConfigError(CggmError, ValueError):
    """Invalid model, data, optimizer or experiment configuration."""


class UnsupportedLossError(ConfigError):
    pass


class FormatError(CggmError, ValueError):
    """A binary file could not be parsed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass
