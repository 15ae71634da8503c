"""Exception hierarchy shared by all homoglab modules."""


class HomoglabError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(HomoglabError):
    """A parameter, preset, or config file entry is out of its valid range."""


class FieldRangeError(HomoglabError):
    """A field value left the representable range (e.g. exp overflow).

    Carries the flat cell index and the offending value so callers can
    point at the exact grid location.
    """

    def __init__(self, message: str, cell_index: int | None = None, value: float | None = None):
        super().__init__(message)
        self.cell_index = cell_index
        self.value = value


class AssemblyError(HomoglabError):
    """An assembled operator or right-hand side violates a structural identity."""


class SolverConvergenceError(HomoglabError):
    """Iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message: str, achieved_residual: float, iterations: int):
        super().__init__(message)
        self.achieved_residual = achieved_residual
        self.iterations = iterations
