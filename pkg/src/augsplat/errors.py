"""Exception types raised across the package."""


class AugSplatError(Exception):
    """Base class for all package errors."""


class BehindCamera(AugSplatError):
    pass


class DegenerateDirection(AugSplatError):
    pass


class DegenerateInput(AugSplatError):
    pass


class DimensionMismatch(AugSplatError):
    pass


class EmptyFootprint(AugSplatError):
    pass


class ClusteringFailed(AugSplatError):
    pass


class ParseError(AugSplatError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionMismatch(AugSplatError):
    pass


class MissingImage(AugSplatError):
    def __init__(self, path):
        super().__init__(f"missing image: {path}")
        self.path = path


class ConfigError(AugSplatError):
    pass
