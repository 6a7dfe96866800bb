"""Exception types raised across the package."""


class DrsclError(Exception):
    """Base class for all package errors."""


class ConfigError(DrsclError, ValueError):
    pass


class NumericalError(DrsclError, ArithmeticError):
    """Base for numerical failures; the CLI maps these to exit code 3."""


class NonFiniteLoss(NumericalError):
    pass


class NonFiniteActivation(NumericalError):
    pass


class ShapeMismatch(DrsclError, ValueError):
    pass


class InvalidVariance(DrsclError, ValueError):
    pass


class RenyiUndefined(NumericalError):
    """The Renyi integrand is not integrable for the given variances and order.

    ``index`` is the offending latent dimension when the failure comes from a
    per-dimension evaluation, else ``None``.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class GridTooNarrow(NumericalError):
    pass


class InvalidLabel(DrsclError, ValueError):
    pass


class EmptyDataset(DrsclError, ValueError):
    pass


class InsufficientClasses(DrsclError, ValueError):
    pass


class InvalidShift(DrsclError, ValueError):
    pass


class BadMagic(DrsclError, ValueError):
    pass


class CountMismatch(DrsclError, ValueError):
    pass


class TruncatedFile(DrsclError, ValueError):
    pass


class IncompleteMatrix(DrsclError, ValueError):
    pass


class SingleTask(DrsclError, ValueError):
    pass


class MissingBaseline(DrsclError, ValueError):
    pass
