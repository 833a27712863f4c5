"""Exception hierarchy.

``ValidationError`` subclasses signal bad input (CLI exit status 1); anything
else escaping a subcommand is treated as a runtime failure (exit status 2).
"""


class ValidationError(ValueError):
    """Input failed a contract check."""


class InvalidInputError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class LengthError(ValidationError):
    pass


class InjectionError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConditionError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class StateError(RuntimeError):
    """Operation called out of order (e.g. backward before forward)."""


class TrainingError(RuntimeError):
    def __init__(self, message, step):
        super().__init__(f"step {step}: {message}")
        self.step = step
