"""EEG-to-gaze regression with a spatial-filtering residual CNN, in plain numpy."""

from .data import EegDataset, SplitSpec, generate_synthetic
from .harness import TrainConfig, bench, evaluate, mae, multi_run, train
from .model import Model, ModelConfig, build, param_count
from .optim import Adam, AdamConfig, mse_loss

__all__ = [
    "Adam", "AdamConfig", "EegDataset", "Model", "ModelConfig", "SplitSpec", "TrainConfig",
    "bench", "build", "evaluate", "generate_synthetic", "mae", "mse_loss", "multi_run",
    "param_count", "train",
]
__version__ = "0.1.0"
