"""Exception types shared across the package."""


class NatlasError(Exception):
    """Base class for all package errors."""


class FormatError(NatlasError):
    """Malformed or unsupported file content (bad magic, header, truncation)."""


class DataError(NatlasError):
    """Well-formed file carrying unusable values (non-finite, out of range)."""


class ConfigError(NatlasError):
    """Invalid configuration. ``errors`` lists every violation found."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class CheckpointError(NatlasError):
    """Corrupt, truncated or version-incompatible checkpoint file."""
