"""Exception hierarchy shared across the package."""


class AlsStratError(Exception):
    """Base class for all errors raised by alsstrat."""


class ProjectionError(AlsStratError, ValueError):
    pass


class GeometryError(AlsStratError, ValueError):
    pass


class RasterParseError(AlsStratError, ValueError):
    pass


class RasterError(AlsStratError, ValueError):
    pass


class ClassificationError(AlsStratError, ValueError):
    pass


class LasError(AlsStratError, ValueError):
    """Malformed or unsupported LAS payload."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LazNotSupportedError(LasError):
    pass


class SamplingError(AlsStratError, ValueError):
    pass


class ManifestError(AlsStratError, ValueError):
    pass


class StatsError(AlsStratError, ValueError):
    pass


class MaePrepError(AlsStratError, ValueError):
    pass


class TilingError(AlsStratError, ValueError):
    pass


class MetricsError(AlsStratError, ValueError):
    pass


class FetchError(AlsStratError):
    pass


class ChecksumMismatchError(FetchError):
    pass


class ConfigError(AlsStratError, ValueError):
    pass
