"""Exception types shared across the package."""


class LngtError(Exception):
    """Base class for all package errors."""


class ParameterError(LngtError, ValueError):
    """An argument is outside its documented domain."""


class DataError(LngtError, ValueError):
    """Input data is malformed (non-finite, too short, wrong schema)."""


class ContractError(LngtError):
    """An operation was asked to do something its contract does not cover."""
