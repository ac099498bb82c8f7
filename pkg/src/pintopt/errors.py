"""Exception types raised by the solvers and the experiment harness."""


class PintoptError(Exception):
    """Base class; ``partial`` may carry results computed before the failure."""

    partial = None


class InvalidConfig(PintoptError, ValueError):
    pass


class NonConvergence(PintoptError, RuntimeError):
    """An inner Picard solve failed to reach its tolerance."""


class SingularLinearization(PintoptError, ArithmeticError):
    pass


class InsufficientData(PintoptError, ValueError):
    pass


class TapeMismatch(PintoptError, ValueError):
    pass


class MaxItersExceeded(PintoptError, RuntimeError):
    """Iteration cap hit; ``partial`` carries whatever was computed so far."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class DivergenceDetected(PintoptError, RuntimeError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ParseError(InvalidConfig):
    def __init__(self, message, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(InvalidConfig):
    def __init__(self, message, field: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ExperimentFailed(PintoptError, RuntimeError):
    """A solver failure inside an experiment; the original error is ``__cause__``."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class InvalidInput(PintoptError, ValueError):
    pass
