"""Long-tail trajectory prediction with training-dynamics clusters and a
prototypical contrastive term, on a numpy autodiff core."""

from .config import ExperimentConfig, from_dict, load_config, sub_seed
from .errors import ConfigurationError, ContractError, DataError, StageError, TractError, TrainingError

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DataError",
    "ExperimentConfig",
    "StageError",
    "TractError",
    "TrainingError",
    "from_dict",
    "load_config",
    "sub_seed",
]
