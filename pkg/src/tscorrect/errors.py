"""Error categories raised across the package.

Four kinds, matching how callers should react: fix the shapes, fix the
config file, fix the input file, or report a bug (contract violations).
"""


class DimensionError(ValueError):
    """Array shapes or axes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


class LoadError(ValueError):
    """An input file cannot be parsed; message cites row/column when known."""


class ContractError(RuntimeError):
    """An internal invariant was violated (non-finite values, bad state)."""
