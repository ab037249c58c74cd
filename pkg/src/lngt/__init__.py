"""Label-noise toolkit: synthetic data, noise models, robust losses and training loops."""

from .errors import ContractError, DataError, LngtError, ParameterError

__version__ = "0.1.0"

__all__ = ["ContractError", "DataError", "LngtError", "ParameterError", "__version__"]
