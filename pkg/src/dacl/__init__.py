"""Density-aware contrastive learning for semi-supervised segmentation, at desk scale."""

__version__ = "0.1.0"

from .config import ABLATIONS, TrainConfig, load_config  # noqa: E402
from .errors import ConfigError, ContractError, DaclError  # noqa: E402

__all__ = ["ABLATIONS", "TrainConfig", "load_config", "ConfigError", "ContractError", "DaclError",
           "__version__"]
