"""Two-stream video question answering with temporal referring pre-training
on a synthetic event world."""

from dest_qa.config import ConfigError, TrainConfig
from dest_qa.numeric import NumericError
from dest_qa.predictors import Predictor, create_predictor

__all__ = ["ConfigError", "NumericError", "Predictor", "TrainConfig", "create_predictor"]
