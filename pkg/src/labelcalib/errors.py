"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data violates a documented invariant (bad values, bad ranges)."""


class DimensionError(ValidationError):
    """Shapes or class counts of two objects do not line up."""


class FormatError(ValidationError):
    """A file is not a well-formed labelcalib artifact (magic, version, size)."""
