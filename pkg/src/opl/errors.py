"""Exception types shared across the package."""


class FormatError(ValueError):
    """Raised when a file's bytes do not match the expected on-disk format."""


class ValidationError(ValueError):
    """Raised when a value, shape, or configuration violates a contract."""
