"""Exception hierarchy shared across the package.

Every error raised on purpose derives from :class:`AdmetaError`, so callers
(and the CLI exit-code mapping) can distinguish our failures from bugs.
"""


class AdmetaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AdmetaError):
    """Tensor dimensions are incompatible with the requested operation."""


class LabelError(AdmetaError):
    """A class label is outside the valid range."""


class ContractError(AdmetaError):
    """An operation was called in a way that violates its contract."""


class ParameterError(AdmetaError):
    """A parameter set does not match the model schema."""


class IngestionError(AdmetaError):
    """A dataset could not be read (missing files, empty manifest)."""


class GeometryError(AdmetaError):
    """Samples of a dataset disagree on their shape."""


class FormatError(AdmetaError):
    """A binary file (checkpoint or sample record) is malformed."""


class ConfigError(AdmetaError):
    """A run configuration is invalid or contains unknown keys."""
