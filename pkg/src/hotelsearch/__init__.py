"""Asymmetric multimodal dense retrieval for hotel search, from scratch.

A small-tower query encoder paired with a large-tower document encoder that
fuses gallery images with text, trained with a weighted sum of a contrastive
retrieval loss, a masked-token loss over geography, and a visual facility
prediction loss.
"""

__version__ = "0.1.0"

from .config import RunConfig
from .errors import (ConfigError, ContractError, InputError, LengthError,
                     NumericError, ParseError, ShapeError)

__all__ = [
    "RunConfig",
    "ConfigError",
    "ContractError",
    "InputError",
    "LengthError",
    "NumericError",
    "ParseError",
    "ShapeError",
    "__version__",
]
