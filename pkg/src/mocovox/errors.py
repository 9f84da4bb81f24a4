"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MocoVoxError(Exception):
    exit_code = 1


class ConfigError(MocoVoxError, ValueError):
    exit_code = 2


class FormatError(ConfigError):
    """Malformed on-disk artifact (checkpoint, manifest, run config)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ShapeError(ConfigError):
    pass


class BoundsError(ConfigError, IndexError):
    pass


class ContractError(MocoVoxError, ValueError):
    exit_code = 2


class DegenerateSignalError(ContractError):
    pass


class TapeError(ContractError):
    pass


class StateError(MocoVoxError, RuntimeError):
    exit_code = 2


class DataError(MocoVoxError, ValueError):
    exit_code = 2


class DataIOError(MocoVoxError, OSError):
    exit_code = 3


class NumericError(MocoVoxError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
