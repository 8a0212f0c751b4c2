"""Exception hierarchy shared by every module.

The CLI maps ``ValidationError`` subclasses to exit code 1 and
``InvariantViolation`` to exit code 2.
"""


class ValidationError(Exception):
    """Bad user input: configuration, file contents, shapes."""


class ConfigError(ValidationError, ValueError):
    pass


class FormatError(ValidationError):
    """Malformed file. ``offset`` is the byte offset where parsing failed."""

    def __init__(self, message, offset=None, name=None):
        self.offset = offset
        self.name = name
        parts = [message]
        if name is not None:
            parts.append(f"tensor={name!r}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts))


class VersionError(ValidationError):
    pass


class ShapeMismatchError(ValidationError):
    def __init__(self, mismatched):
        self.mismatched = list(mismatched)
        super().__init__("shape mismatch for: " + ", ".join(self.mismatched))


class StateError(RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class InvariantViolation(RuntimeError):
    """Internal bug: a routing or coverage invariant failed."""


class UndefinedMetricError(ValueError):
    """The metric has no defined value for this input (e.g. empty confusion matrix)."""
