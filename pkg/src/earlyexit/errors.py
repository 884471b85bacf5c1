"""Exception types shared across the engine."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ValidationError(ValueError):
    """An argument or structure violates a documented contract."""


class StateError(RuntimeError):
    """An operation was called in the wrong state (e.g. backward without a cached forward)."""


class ParseError(ValueError):
    """Malformed input file. ``offset`` is the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """Malformed config text. ``line`` is 1-based, or None when not tied to a line."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class PayloadLengthError(ModelFormatError):
    pass
