"""Exception types shared across the toolkit."""


class VDSMError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(VDSMError, ValueError):
    pass


class TrainingDivergenceError(VDSMError, FloatingPointError):
    """Raised when a loss or gradient becomes non-finite.

    ``param_name`` names the offending parameter when known.
    """

    def __init__(self, message, param_name=None):
        super().__init__(message)
        self.param_name = param_name


class UndefinedMetricError(VDSMError, ValueError):
    pass


class IngestionError(VDSMError, ValueError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ConfigError(VDSMError, ValueError):
    pass
