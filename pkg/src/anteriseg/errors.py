"""Exception types shared across the toolkit.

The CLI maps ValidationError (and plain ValueError) to exit code 1 and
I/O failures (OSError) to exit code 2.
"""


class ValidationError(ValueError):
    """Bad input values, shapes, vocabularies or constraint violations."""


class TensorFormatError(ValidationError):
    """Malformed tensor file: bad magic, header, or payload."""
