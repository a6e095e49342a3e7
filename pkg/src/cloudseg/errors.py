"""Exception types shared across the library.

Shape/argument misuse raises plain ValueError and bad indices raise
IndexError; the classes here cover the failure modes the CLI maps to
distinct exit codes.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (unknown key, bad widths...)."""


class DataFormatError(ValueError):
    """Malformed on-disk data: scan/label/checkpoint files."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or was fed non-finite values."""
