"""Exception types raised by the toolkit."""


class AssimilationError(Exception):
    """Base class for every error raised by this package."""


class InvalidModelError(AssimilationError, ValueError):
    pass


class InvalidParameterError(AssimilationError, ValueError):
    pass


class ShapeError(AssimilationError, ValueError):
    pass


class DegenerateEnsembleError(AssimilationError, ValueError):
    pass


class NumericalOverflowError(AssimilationError, FloatingPointError):
    """Non-finite values appeared while integrating the model.

    ``step`` is the 1-based index of the RK4 step that produced them and
    ``members`` lists the offending ensemble members (empty for a single
    state).
    """

    def __init__(self, message, step=None, members=()):
        super().__init__(message)
        self.step = step
        self.members = tuple(members)


class NumericalFailureError(AssimilationError, ArithmeticError):
    """A linear solve in the analysis step failed."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class SymmetryViolationError(NumericalFailureError):
    pass


class TuningFailureError(AssimilationError, RuntimeError):
    """Every cell of a tuning grid diverged."""

    def __init__(self, message, cells=()):
        super().__init__(message)
        self.cells = list(cells)
