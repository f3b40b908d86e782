"""Asymmetric non-local contrastive learning for single-image deraining.

Modules: ``data`` (images, patches, synthetic rain), ``sampler`` (block
matching and contrastive sampling), ``losses``, ``networks``, ``trainer``,
``analysis`` (entropy, spectra, metrics), and the ``cli`` front end.
"""

__version__ = "0.1.0"

from .errors import AnlclError, ConfigError, DataIOError, DimensionError, FormatError, NumericError, ParameterError

__all__ = ["__version__", "AnlclError", "ConfigError", "DataIOError", "DimensionError", "FormatError",
           "NumericError", "ParameterError"]
