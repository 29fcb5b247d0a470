"""Exception types shared across the package."""


class CMESError(Exception):
    pass


class ValidationError(CMESError, ValueError):
    """Input violates a documented precondition."""


class DataFormatError(ValidationError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ValidationError):
    pass


class UndefinedMetricError(CMESError, ValueError):
    """Metric is not defined for the given input (empty, single class, ...)."""


class NumericError(CMESError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class GradientCheckError(NumericError):
    pass
