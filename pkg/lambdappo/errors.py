"""
Exceptions raised by lambdappo.

Every error derives from a builtin so callers that only know about
``ValueError`` or ``ArithmeticError`` keep working. The command line maps
:class:`ContractError` to exit code 1 and :class:`NumericError` to exit code 2.
"""

__all__ = ('ContractError', 'DomainError', 'ConfigError', 'CheckpointError',
           'NumericError', 'IntegrationError', 'TrimError', 'DivergenceError')


class ContractError(ValueError):
    """
    A precondition of an operation was violated by its caller.
    """


class DomainError(ContractError):
    """
    An input lies outside the domain of a function (non-finite values,
    actions on the squashing bounds, ...).
    """


class ConfigError(ContractError):
    """
    A configuration file or value is invalid.
    """


class CheckpointError(ContractError):
    """
    A persisted artifact cannot be loaded as requested.
    """


class NumericError(ArithmeticError):
    """
    A numerical procedure failed.
    """


class IntegrationError(NumericError):
    """
    A time step produced non-finite values.

    :param field: name of the first offending state field
    """

    def __init__(self, message: str, field: str = ''):
        super().__init__(message)
        self.field = field


class TrimError(NumericError):
    """
    The steady-state solver did not converge.

    :param residual: max-norm of the derivative at the last iterate
    """

    def __init__(self, message: str, residual: float = float('nan')):
        super().__init__(message)
        self.residual = residual


class DivergenceError(NumericError):
    """
    A model left the finite range during an episode.
    """
