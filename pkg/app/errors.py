class CMambaError(Exception):
    """Base class for every error raised by the toolkit"""


class ShapeError(CMambaError, ValueError):
    """Incompatible tensor or configuration shapes"""


class TapeError(CMambaError, RuntimeError):
    """Misuse of the recording tape (non-scalar loss, detached tensor, stale node)"""


class NumericalError(CMambaError, ArithmeticError):
    """A non-finite value appeared where finiteness is required"""


class DomainError(CMambaError, ValueError):
    """An argument lies outside the domain of the operation"""


class ContractError(CMambaError, RuntimeError):
    """An operation was called in a phase where it is not allowed"""


class DataError(CMambaError, ValueError):
    """Problems with input series: parsing, splitting, windowing"""


class ConfigError(CMambaError, ValueError):
    """Invalid or unknown configuration"""
