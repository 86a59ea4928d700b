"""Zero-reference restoration of under- and over-exposed images.

Exposure is first corrected by a learned, spatially varying gamma blend on
the Retinex illumination map; a conditional diffusion model then treats the
corrected image as a partially noised state and samples it back to a clean
one.
"""

from .errors import (ConfigError, CorpusError, DimensionError, DomainError, ImageFormatError,
                     ImageLoadError, RestorationError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "CorpusError", "DimensionError", "DomainError", "ImageFormatError",
           "ImageLoadError", "RestorationError", "__version__"]
