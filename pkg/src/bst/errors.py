class BstError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(BstError, ValueError):
    """Incompatible extents or block shapes."""


class FormatError(BstError, ValueError):
    """A BSR matrix or binary container violates its invariants."""


class IngestionError(BstError, OSError):
    def __init__(self, message, path=None, offset=None):
        super().__init__(message)
        self.path = path
        self.offset = offset


class ConfigError(BstError, ValueError):
    def __init__(self, message, line=None, path=None):
        where = f"{path or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.path = path


class TapeError(BstError, RuntimeError):
    """Misuse of the autodiff tape (e.g. backward before forward)."""
