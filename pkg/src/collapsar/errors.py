"""Exception hierarchy shared by every module."""


class CollapsarError(Exception):
    """Base class for all library errors."""


class InvalidOperator(CollapsarError, ValueError):
    pass


class ShapeError(CollapsarError, ValueError):
    pass


class DegenerateState(CollapsarError, ArithmeticError):
    """A state with zero norm (or a wave-function node) was encountered."""


class NotPositiveSemiDefinite(CollapsarError, ValueError):
    pass


class UseModeListDirectly(CollapsarError, TypeError):
    """Cosine-sum kernels are already discrete lines and have no density."""


class InvalidArgument(CollapsarError, ValueError):
    pass


class GridMismatch(CollapsarError, ValueError):
    pass


class TooLarge(CollapsarError, MemoryError):
    pass


class ConfigError(CollapsarError, ValueError):
    """Scenario parsing or validation failure."""

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems or [])
