"""
Error Types
Exception hierarchy shared by the library and the command-line surface.
"""


class ConfSMoEError(Exception):
    """Base class for every error raised by this package"""
    exit_code = 1


class ConfigurationError(ConfSMoEError, ValueError):
    """Invalid or inconsistent configuration (K > N, tau <= 0, unknown keys, ...)"""
    exit_code = 1


class DimensionError(ConfSMoEError, ValueError):
    """Array shapes do not agree"""
    exit_code = 1


class DomainError(ConfSMoEError, ValueError):
    """Input lies outside the domain of a function (e.g. boundary of the simplex)"""
    exit_code = 2


class OracleError(ConfSMoEError, ArithmeticError):
    """The finite-difference oracle evaluated a non-finite value"""
    exit_code = 2


class NonDifferentiablePointError(ConfSMoEError, ArithmeticError):
    """A Jacobian check kept hitting a ReLU kink or a Top-K switch"""
    exit_code = 2


class ImputationError(ConfSMoEError, ValueError):
    """Pre-imputation is impossible (empty modality pool)"""
    exit_code = 1


class UndefinedMetricError(ConfSMoEError, ValueError):
    """A metric has no defined value for the given input"""
    exit_code = 2


class NumericalFailure(ConfSMoEError, ArithmeticError):
    """Training produced a non-finite loss"""
    exit_code = 2


class AuditFailure(ConfSMoEError):
    """A theory audit missed its threshold"""
    exit_code = 3
