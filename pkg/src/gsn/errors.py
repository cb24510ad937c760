"""Exception hierarchy shared across the package."""


class GSNError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(GSNError, ValueError):
    pass


class ShapeError(InvalidArgumentError):
    pass


class FormatError(GSNError):
    """Malformed splat, checkpoint or manifest file."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class VersionError(FormatError):
    pass


class CameraError(FormatError):
    """A stored camera violates the camera invariants."""


class MissingFileError(GSNError, FileNotFoundError):
    pass


class ConfigError(GSNError):
    """Bad configuration value or key; maps to CLI exit code 2."""


class NonFiniteLossError(GSNError, FloatingPointError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class NonDeterministicError(GSNError):
    pass
