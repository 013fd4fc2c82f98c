"""Exception hierarchy shared across the package."""


class CCAugError(Exception):
    """Base class for all package errors."""


class ParseError(CCAugError, ValueError):
    pass


class AlignmentError(CCAugError, ValueError):
    pass


class LabelError(CCAugError, ValueError):
    pass


class SchemaError(CCAugError, ValueError):
    pass


class LengthError(CCAugError, ValueError):
    pass


class ConfigurationError(CCAugError, ValueError):
    pass


class NotTrainableError(CCAugError):
    pass


class ReweightUndefinedError(CCAugError, ValueError):
    pass


class StageError(CCAugError):
    """Raised by the pipeline; ``stage`` names the failing stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
