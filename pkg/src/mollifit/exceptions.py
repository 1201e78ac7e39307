"""Exception hierarchy shared across the package."""


class MollifitError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MollifitError):
    """A spec or configuration value is invalid (bad parameter, bad key)."""


class ShapeError(MollifitError):
    """Array dimensions are inconsistent with the model or data."""


class UnsupportedLossError(MollifitError):
    """The requested operation is undefined for this loss kind."""


class DegenerateParameterError(MollifitError):
    """A parameter vector cannot be normalized (zero index vector)."""


class RankDeficiencyError(MollifitError):
    """A normal matrix stayed singular after ridge regularization."""


class EmptyBlockError(MollifitError):
    """An operation needs a parameter block the model does not have."""


class UndefinedRateError(MollifitError):
    """A rate exponent is undefined (zero mean squared error)."""
