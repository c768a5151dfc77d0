"""Exception hierarchy.

Each class maps to one CLI exit status: usage/configuration problems exit 1,
data problems exit 2, numerical or convergence failures exit 3.
"""


class SSMError(Exception):
    """Base class for every error raised by ssmlab."""


class ConfigurationError(SSMError, ValueError):
    """Invalid model configuration, option or backend choice."""


class DomainError(SSMError, ValueError):
    """A parameter or state value lies outside its support."""


class UnsupportedModelError(ConfigurationError):
    """The model lacks a capability the requested operation needs."""


class DataError(SSMError, ValueError):
    """Malformed or inconsistent input data."""


class ImpossibleDataError(DataError):
    """The data have zero probability under the model."""


class NumericalError(SSMError, ArithmeticError):
    """A numerical procedure failed (singular matrix, underflow, ...)."""


class DepletionError(NumericalError):
    """All particle weights underflowed."""


class GridCoverageError(NumericalError):
    """All probability mass escaped a discretization grid."""


class ModeFindingError(NumericalError):
    """The Laplace inner optimization did not find a proper mode."""


class EstimabilityError(NumericalError):
    """Too many simulation replicates failed to fit."""


class ReliabilityError(NumericalError):
    """Too many bootstrap refits failed for the result to be trusted."""
