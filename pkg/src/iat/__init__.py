"""Instance-aware single-object tracking at desk scale.

Three branches share one backbone: a correlation-filter classifier, a
probabilistic box regressor, and a contrastive instance head that is only
used while training.
"""

from .config import ConfigError, DatasetSpec, IATConfig, load_config, save_config
from .geometry import ContractError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DatasetSpec", "IATConfig", "load_config", "save_config"]
