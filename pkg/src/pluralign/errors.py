"""Exception hierarchy shared across the package."""


class PluralignError(Exception):
    pass


class InvalidArgumentError(PluralignError, ValueError):
    pass


class InterventionError(PluralignError, RuntimeError):
    pass


class ConfigError(PluralignError):
    pass


class DataError(PluralignError):
    pass


class ParseError(DataError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class TemplateError(PluralignError, ValueError):
    pass


class CheckpointError(PluralignError):
    pass
