"""Exception hierarchy shared across the package."""


class CascadeError(Exception):
    """Base class for all package errors."""


class DataFormatError(CascadeError):
    """A file or document could not be parsed or has malformed content."""


class FormatVersionError(DataFormatError):
    """A serialized document declares an unsupported format version."""


class ValidationError(CascadeError):
    """An object violates a documented invariant."""


class StructureError(ValidationError):
    """Dimensions or shapes do not match the catalog they are used with."""


class FingerprintMismatchError(ValidationError):
    """An artifact was produced against a different catalog."""


class InfeasibleBudgetError(CascadeError):
    """The budget cannot pay for a single call to any service."""
