"""Shared exception types."""


class ShapeError(ValueError):
    """Array dimensions do not match the declared layer sizes."""


class InvalidParameterError(ValueError):
    """Parameters contain non-finite entries or violate their constraints."""


class NumericsError(FloatingPointError):
    """A state, trace, gradient, or loss became non-finite."""


class DivergenceError(RuntimeError):
    """A learning run crossed its divergence guard and was aborted."""


class ConfigError(ValueError):
    """One or more problems in an experiment config; collects all messages."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))
