"""Exception types shared across the library."""


class Da2Error(Exception):
    """Base class for all library errors."""


class ShapeError(Da2Error):
    """Tensor shapes or extents violate an operation's contract."""


class ConfigError(Da2Error):
    """A configuration value violates a documented constraint."""


class TapeError(Da2Error):
    """Misuse of an operation tape (non-scalar tail, double replay, ...)."""


class OracleError(Da2Error):
    """The finite-difference oracle hit a non-finite function value."""


class FormatError(Da2Error):
    """A binary file does not conform to its documented layout."""


class NumericError(Da2Error):
    """Training produced a non-finite quantity (NaN/Inf loss or gradient)."""
