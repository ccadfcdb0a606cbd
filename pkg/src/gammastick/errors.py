"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of a function or distribution."""


class EvaluationError(ValueError):
    """A metric cannot be evaluated for the given inputs."""


class SamplingError(RuntimeError):
    """A sampler was asked to draw from an impossible configuration."""


class NumericalError(ArithmeticError):
    """A quantity that must be finite was not.

    ``term`` names the offending piece of the computation.
    """

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class FittingError(RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ChainError(RuntimeError):
    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class ParseError(ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
