"""Preference-ranking recommendation with a small numpy language model.

Pipeline: rating logs -> preference samples -> SFT -> multi-negative
preference optimization -> candidate-probability AUC.
"""

from .errors import ConfigError, DataError, DmporecError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DmporecError", "NumericError", "__version__"]
