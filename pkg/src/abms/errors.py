"""Exception types shared across the package."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite or degenerate value.

    ``context`` carries whatever identifies the failing evaluation
    (step index, node name, offending sample, ...).
    """

    def __init__(self, message, **context):
        self.context = context
        if context:
            detail = ", ".join(f"{k}={_short(v)}" for k, v in context.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class StepRangeError(ValueError):
    """Step index outside the schedule, or a non-monotone step pair."""


class ScheduleError(ValueError):
    """Invalid noise schedule coefficients."""


class UnsupportedPrimitiveError(TypeError):
    """A pipeline used an operation outside the gradient engine's primitive set."""


def _short(v):
    s = repr(v)
    return s if len(s) < 80 else s[:77] + "..."
