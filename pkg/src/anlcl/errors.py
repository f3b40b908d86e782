"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line front end can map
failures onto categorized process exit statuses.
"""


class AnlclError(Exception):
    exit_code = 1


class DataIOError(AnlclError, OSError):
    """Missing or unwritable files."""

    exit_code = 2


class ConfigError(AnlclError, ValueError):
    """Invalid configuration, bad parameter, or unusable dataset."""

    exit_code = 3


class ParameterError(ConfigError):
    pass


class DimensionError(ConfigError):
    """Array shapes that do not fit the operation."""


class FormatError(AnlclError, ValueError):
    """Undecodable images, bad checkpoint magic, truncated archives."""

    exit_code = 4


class NumericError(AnlclError, ArithmeticError):
    """Non-finite values where finite ones are required."""

    exit_code = 5
