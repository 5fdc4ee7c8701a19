"""Exception and warning types raised across the package."""


class ZimclustError(Exception):
    """Base class for all package errors."""


class ParseError(ZimclustError):
    pass


class DomainError(ZimclustError, ValueError):
    pass


class DimensionError(ZimclustError, ValueError):
    pass


class EmptySelectionError(ZimclustError):
    pass


class DegenerateCellError(ZimclustError):
    pass


class NumericalError(ZimclustError, ArithmeticError):
    pass


class EmptyClusterError(ZimclustError):
    """A mixture component lost all its responsibility mass."""

    def __init__(self, message, cluster=None, iteration=None):
        super().__init__(message)
        self.cluster = cluster
        self.iteration = iteration


class SingularSystemError(NumericalError):
    pass


class NoProgressError(NumericalError):
    pass


class GeneratorError(ZimclustError):
    pass


class SelectionError(ZimclustError):
    pass


class UsageError(ZimclustError):
    pass


class UnderdispersedWarning(UserWarning):
    """Dispersion score has no root inside the bracket."""


class DegenerateCurveWarning(UserWarning):
    pass
