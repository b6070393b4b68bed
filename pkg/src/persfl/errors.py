"""Exception hierarchy shared by every subsystem."""


class PersFLError(Exception):
    """Base class for all errors raised by the package."""


class DimensionError(PersFLError, ValueError):
    pass


class ParameterError(PersFLError, ValueError):
    pass


class ContractError(PersFLError, ValueError):
    pass


class DataError(PersFLError, ValueError):
    pass


class SizeError(DataError):
    pass


class FeasibilityError(DataError):
    pass


class FormatError(DataError):
    """Malformed binary input; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(PersFLError):
    pass


class ChecksumError(IntegrityError):
    pass


class ConfigError(PersFLError, ValueError):
    pass
