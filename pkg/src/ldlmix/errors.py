"""Exception types raised across the package."""


class LdlError(Exception):
    """Base class for every error raised by ldlmix."""


class DimensionError(LdlError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(LdlError, ValueError):
    """A parameter or option is outside its allowed domain."""


class ContractError(LdlError, ValueError):
    """A documented precondition of an operation was violated."""


class ParseError(LdlError, ValueError):
    """An input file is malformed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
