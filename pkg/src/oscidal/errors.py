"""Exception hierarchy shared by every oscidal module."""


class OscidalError(Exception):
    """Base class for all library errors."""


class NoneSolution(OscidalError):
    """An operation needs a manufactured exact solution but none is set."""


class InvalidConfig(OscidalError):
    """A configuration value violates its documented constraints."""


class GridMismatch(OscidalError):
    """A grid function is not sampled where the operation requires."""


class SingularMatrix(OscidalError):
    """The discrete operator matrix cannot be factorized."""


class DimensionMismatch(OscidalError):
    """Array shapes disagree with the declared network architecture."""


class NonFiniteLoss(OscidalError):
    """Training produced a NaN or infinite loss.

    ``partial`` carries whatever diagnostics were collected before the
    failure (for a run, the grades already completed).
    """

    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


class NoConvergence(OscidalError):
    """Power iteration hit its iteration cap.

    The best available estimate is kept on ``estimate``.
    """

    def __init__(self, msg, estimate):
        super().__init__(msg)
        self.estimate = estimate


class ZeroDenominator(OscidalError):
    """A relative error was requested against an identically zero reference."""


class CorruptCheckpoint(OscidalError):
    """A checkpoint or cache file failed to parse or verify."""
