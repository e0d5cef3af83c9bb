"""Exception hierarchy shared across the package."""


class ImpliedFilterError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ImpliedFilterError, ValueError):
    """An argument violates a documented precondition."""


class NoSolutionError(ImpliedFilterError, ValueError):
    """The requested inverse (e.g. implied volatility) does not exist."""


class NumericFailureError(ImpliedFilterError, RuntimeError):
    """A numerical routine failed to reach its tolerance.

    ``achieved`` holds the best tolerance reached and ``best`` the best
    iterate, when one is available.
    """

    def __init__(self, message, achieved=None, best=None, indices=None):
        super().__init__(message)
        self.achieved = achieved
        self.best = best
        self.indices = indices


class DegeneratePathError(ImpliedFilterError, ValueError):
    """A variance path with zero integrated variance has no likelihood."""


class FilterDegeneracyError(ImpliedFilterError, RuntimeError):
    """Every particle received zero likelihood."""


class EmptyChainError(ImpliedFilterError, ValueError):
    """No usable quotes remain after filtering."""


class InvalidRegressionError(ImpliedFilterError, ValueError):
    """The put-call parity regression produced an unusable fit."""


class UnitMismatchError(ImpliedFilterError, ValueError):
    """A density lives on the wrong kind of state grid."""
