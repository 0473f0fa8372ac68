"""Exception hierarchy shared by every module."""


class SplitGuardError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SplitGuardError, ValueError):
    exit_code = 2


class SchemaError(ConfigError):
    """Attribute table or checkpoint does not match the expected schema."""


class SizeError(ConfigError):
    """More samples requested than available."""


class NumericError(SplitGuardError, FloatingPointError):
    """Non-finite values where finite ones are required."""

    exit_code = 3


class DivergenceError(NumericError):
    exit_code = 3


class TransportError(SplitGuardError, ConnectionError):
    exit_code = 4

    def __init__(self, message, retries=0):
        super().__init__(message)
        self.retries = retries


class ProtocolError(TransportError):
    """Malformed frame. ``code`` identifies the failure kind."""

    BAD_MAGIC = "bad_magic"
    BAD_VERSION = "bad_version"
    BAD_TYPE = "bad_type"
    BAD_DTYPE = "bad_dtype"
    CRC = "crc"
    TRUNCATED = "truncated"
    SHAPE = "shape"

    def __init__(self, code, message=""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


class SplitAccessError(SplitGuardError, PermissionError):
    """A guarded split was touched from a training context."""
