class ValidationError(ValueError):
    """Bad input: malformed file, parameter out of range, violated precondition."""


class UnstableQueueError(ValidationError):
    """Queue metrics requested for rho >= 1; the queue grows without bound."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class BracketError(RuntimeError):
    """A bisection bracket whose endpoint verdicts are inverted or infeasible."""

    def __init__(self, message, low=None, high=None):
        super().__init__(message)
        self.low = low
        self.high = high
