"""Exception types shared across the package."""


class UHDFError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(UHDFError, ValueError):
    pass


class SizeError(UHDFError, ValueError):
    pass


class ConfigError(UHDFError, ValueError):
    pass


class ContractError(UHDFError, RuntimeError):
    """A caller broke an API contract (e.g. backward twice on one tape)."""


class ChannelIndexError(UHDFError, IndexError):
    pass


class FormatError(UHDFError, ValueError):
    """Malformed file contents. ``offset`` is the byte position, when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CompatibilityError(UHDFError, ValueError):
    pass


class NumericalError(UHDFError, ArithmeticError):
    pass
