"""Exception hierarchy shared across the package."""


class EarlyFusionError(Exception):
    """Base class for all package errors."""


class ShapeError(EarlyFusionError, ValueError):
    pass


class UsageError(EarlyFusionError):
    pass


class ConfigError(EarlyFusionError, ValueError):
    pass


class ParseError(EarlyFusionError, ValueError):
    """Raised when a grounding phrase does not match the grammar.

    ``position`` is the character offset (into the stripped, lowercased text)
    where matching stopped.
    """

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class FormatError(EarlyFusionError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IoError(EarlyFusionError, OSError):
    pass


class DivergenceError(EarlyFusionError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
