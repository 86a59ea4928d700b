"""Exception types raised across the package."""


class RestorationError(Exception):
    """Base class for all errors raised by illumrestore."""


class DimensionError(RestorationError, ValueError):
    """Array shapes or sizes are incompatible with the operation."""


class DomainError(RestorationError, ValueError):
    """A scalar argument lies outside its valid range."""


class ImageFormatError(RestorationError, ValueError):
    """The file is not a supported lossless raster or is malformed."""


class ImageLoadError(RestorationError, OSError):
    """The image file could not be opened."""


class CorpusError(RestorationError):
    """A directory of images is empty or entirely unreadable."""


class ConfigError(RestorationError, ValueError):
    """A configuration file or value is invalid."""
