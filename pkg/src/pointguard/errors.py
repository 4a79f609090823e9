"""Exception types shared across the package."""


class PointGuardError(Exception):
    """Base class; ``code`` is echoed in CLI error JSON."""

    code = "error"


class ConfigError(PointGuardError, ValueError):
    code = "configuration"


class InputError(PointGuardError, ValueError):
    code = "input"


class FormatError(PointGuardError):
    """Raised for corrupt or truncated files.

    Args:
        message: what went wrong.
        offset: byte offset in the file where parsing failed.
    """

    code = "format"

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DivergedError(PointGuardError, ArithmeticError):
    code = "diverged"

    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"training loss became non-finite in epoch {epoch}")


class DegenerateInputError(InputError):
    code = "degenerate_input"
