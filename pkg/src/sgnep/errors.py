"""Exception hierarchy shared by all sgnep modules."""


class SgnepError(Exception):
    """Base class for every error raised by this package."""


# graph
class GraphError(SgnepError, ValueError):
    pass


class Disconnected(GraphError):
    pass


class SelfLoop(GraphError):
    pass


class DuplicateEdge(GraphError):
    pass


class DimensionMismatch(SgnepError, ValueError):
    pass


# sets and projections
class InvertedBounds(SgnepError, ValueError):
    pass


class EmptyPolytope(SgnepError, ValueError):
    pass


class MaxIterations(SgnepError, RuntimeError):
    """An iterative method hit its iteration cap.

    ``best`` carries the last iterate when the caller can still use it.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


# oracles / operators
class OracleFailure(SgnepError, RuntimeError):
    pass


class NoDeterministicOracle(SgnepError, NotImplementedError):
    pass


class NotPositiveDefinite(SgnepError, ValueError):
    pass


class Degenerate(SgnepError, RuntimeError):
    pass


# linear programming
class LPError(SgnepError, RuntimeError):
    pass


class LPUnbounded(LPError):
    pass


class LPInfeasible(LPError):
    pass


class NumericalBreakdown(LPError):
    pass


class DimensionTooLarge(SgnepError, ValueError):
    pass


# io
class InvalidNetworkFile(SgnepError, ValueError):
    pass


class ConfigError(SgnepError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class RunFailed(SgnepError, RuntimeError):
    """The main loop raised; ``partial`` holds the trajectory up to the failure."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
