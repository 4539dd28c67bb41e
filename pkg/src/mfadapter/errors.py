"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so library code should raise
the most specific type that applies.
"""


class DimensionError(ValueError):
    """Operands have incompatible shapes or ranks."""


class GeometryError(ValueError):
    """A feature map is too small for the requested window geometry."""


class ValidationError(ValueError):
    """Inputs violate a structural precondition (counts, labels, config)."""


class FormatError(ValueError):
    """A serialized artifact is malformed, truncated, or version-mismatched."""


class StateError(RuntimeError):
    """An operation was called without the runtime state it needs."""


class NonFiniteError(FloatingPointError):
    """A numeric operation produced NaN or Inf."""
