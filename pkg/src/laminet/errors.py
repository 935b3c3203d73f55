"""Exception types shared across the toolkit.

Every public operation raises one of these (or a builtin) so that callers,
including the CLI, can map failures to distinct exit codes.
"""


class LaminetError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(LaminetError):
    """Tensor shapes incompatible with the requested operation."""


class AxisError(LaminetError):
    """An axis index is invalid for the given shape."""


class NonFiniteError(LaminetError):
    """A NaN or infinity appeared where the contract forbids it."""


class ConfigError(LaminetError):
    """A configuration value violates its invariants."""


class LabelError(LaminetError):
    """A classification label is outside {0, 1}."""


class FormatError(LaminetError):
    """A serialized file is corrupt, truncated, or of the wrong type."""


class DataError(LaminetError):
    """A dataset is empty, inconsistent, or missing required fields."""


class BoxError(LaminetError):
    """A crop box falls outside the volume it is applied to."""


class ClassError(LaminetError):
    """A scored set lacks the positive or negative class required here."""


class PairingError(LaminetError):
    """Two collections that must describe the same cases do not."""
