"""Exception hierarchy shared across the package."""


class LenslessError(Exception):
    """Base class for every error raised by this package."""


class ImageIOError(LenslessError):
    pass


class UnreadableFileError(ImageIOError):
    """The file does not exist or cannot be opened."""


class UnsupportedFormatError(ImageIOError):
    """The file is readable but is neither 8/16-bit PNG nor PFM."""


class CorruptHeaderError(ImageIOError):
    """The header could be identified but is malformed or truncated."""


class ShapeError(LenslessError, ValueError):
    """Incompatible shapes, or a window that does not fit its parent."""


class SolverError(LenslessError):
    pass


class MetrologyError(LenslessError):
    pass


class FwhmUndefinedError(MetrologyError):
    """The radial profile never falls below one half."""


class GeometryError(LenslessError):
    pass


class DegenerateConfigurationError(GeometryError):
    pass


class ConvergenceError(GeometryError):
    pass


class GridDetectionError(GeometryError):
    pass


class AcquisitionError(LenslessError):
    pass


class ManifestError(AcquisitionError):
    pass


class ConfigError(LenslessError):
    """Invalid run configuration or unresolvable path; raised before any write."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = None if path is None else str(path)
