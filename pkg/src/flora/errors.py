"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (see ``flora.cli``).
"""


class FloraError(Exception):
    """Base class for all package errors."""


class InputError(FloraError, ValueError):
    """An argument was rejected (bad shape, bad value, unknown kind)."""


class ConfigError(FloraError):
    """A component was used in a state or configuration it does not support."""


class FormatError(FloraError):
    """A binary or text artifact could not be parsed."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NumericError(FloraError, ArithmeticError):
    """A non-finite value showed up during optimization or scoring."""
