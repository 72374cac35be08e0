"""Split-model multi-agent training with static and dynamic multi-objective weighting."""

from .config import TaskConfig, TrainConfig, config_from_dict, load_config
from .errors import (BarrierViolation, ChannelClosed, ContractViolation, InvalidArgument,
                     MopsError, NumericFailure, ProtocolError)
from .training import TrainResult, collaborative_inference, run_training

__version__ = "0.1.0"

__all__ = [
    "TaskConfig", "TrainConfig", "config_from_dict", "load_config", "run_training",
    "collaborative_inference", "TrainResult", "MopsError", "InvalidArgument",
    "NumericFailure", "ContractViolation", "BarrierViolation", "ProtocolError",
    "ChannelClosed",
]
