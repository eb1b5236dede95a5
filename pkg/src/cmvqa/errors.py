"""Exception types shared across the package."""


class CMVQAError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CMVQAError, ValueError):
    pass


class TapeError(CMVQAError, RuntimeError):
    pass


class VocabularyError(CMVQAError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ProtocolError(CMVQAError, ValueError):
    """A training/decoding sequence violates the question/answer layout."""


class FormatError(CMVQAError, ValueError):
    """Malformed on-disk artifact (feature file, checkpoint, manifest, taxonomy)."""

    def __init__(self, message, offset=None, line=None):
        self.offset = offset
        self.line = line
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(CMVQAError, ValueError):
    pass


class NumericalError(CMVQAError, ArithmeticError):
    """Non-finite values encountered in losses, gradients or tensors."""
