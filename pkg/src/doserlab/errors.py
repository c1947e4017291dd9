"""Exception hierarchy shared by every module.

The CLI maps each category onto a distinct exit code.
"""


class DoserError(Exception):
    exit_code = 1


class RejectedInput(DoserError, ValueError):
    """Bad argument: wrong shape, out-of-range value, empty collection."""

    exit_code = 2


class PersistenceError(DoserError, OSError):
    exit_code = 3


class NumericalError(DoserError, ArithmeticError):
    """An iterative numerical routine failed to converge."""

    exit_code = 4


class TrainingDivergence(DoserError, FloatingPointError):
    """Non-finite loss or gradient during optimisation."""

    exit_code = 5

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class StateError(DoserError, RuntimeError):
    """Component used before it was trained or calibrated."""

    exit_code = 6
