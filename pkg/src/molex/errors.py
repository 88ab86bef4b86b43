class ShapeError(ValueError):
    pass


class InvalidRowError(ValueError):
    """A softmax row with no finite entry."""


class ConfigError(ValueError):
    """Bad configuration; ``section``/``key`` locate the offending entry when known."""

    def __init__(self, message, section=None, key=None):
        super().__init__(message)
        self.section = section
        self.key = key


class InputError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Non-finite loss or gradient; carries the step index when raised by a training loop."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class UnsupportedModelError(ValueError):
    pass
