"""Early fusion of text and image for segmentation, on a small numpy autodiff core.

Text is rendered into a pseudo image by a light generator, concatenated with
the image along channels, and augmented jointly with the mask before a UNet.
"""

from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    DivergenceError,
    EarlyFusionError,
    FormatError,
    IoError,
    ParseError,
    ShapeError,
    UsageError,
)
from .tensor import Tensor, backward, finite_diff_gradcheck

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DivergenceError",
    "EarlyFusionError",
    "FormatError",
    "IoError",
    "ParseError",
    "RunConfig",
    "ShapeError",
    "Tensor",
    "UsageError",
    "backward",
    "finite_diff_gradcheck",
    "load_config",
]
