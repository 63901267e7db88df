"""prtgrad: relightable neural fields via volume integration of the
radiance-transfer gradient, trained from OLAT HDR captures."""

__version__ = "0.1.0"

from .errors import InvalidInputError, NumericalError, PrtgradError

__all__ = ["InvalidInputError", "NumericalError", "PrtgradError", "__version__"]
