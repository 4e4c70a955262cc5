"""Exception types raised across the package."""


class DepthCalError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(DepthCalError, ValueError):
    """A numeric parameter is non-finite or outside its allowed range."""


class DomainError(DepthCalError, ValueError):
    """An input lies outside the domain of a model (e.g. incidence angle)."""


class ConfigurationError(DepthCalError, ValueError):
    """Inconsistent or unsupported configuration."""


class EmptySelectionError(DepthCalError):
    """The point filters selected no map points."""


class NumericalError(DepthCalError, ArithmeticError):
    """A loss or gradient evaluation produced a non-finite value."""


class FormatError(DepthCalError, ValueError):
    """A dataset, model or configuration file is malformed."""
