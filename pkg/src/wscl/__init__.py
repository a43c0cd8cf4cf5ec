"""Weakly supervised continual learning at desk scale.

Trains compact classifiers on class-incremental task streams where only a
fraction of examples carry labels, with experience replay, pseudo-labeling,
interpolation consistency, and contrastive mining strategies.
"""

from .buffer import ReservoirBuffer, knn_fit_and_predict
from .config import RunConfig, load_config, load_grid
from .data import Batch, Dataset, TaskStream, build_split, make_blobs
from .exceptions import ConfigurationError, NonFiniteError, UsageError
from .learners import Learner, LearnerConfig
from .losses import LossBreakdown, mixup, sharpen, softmax
from .metrics import MetricsMatrix
from .nn import Network, make_conv_net, make_mlp

__all__ = [
    "Batch", "ConfigurationError", "Dataset", "Learner", "LearnerConfig",
    "LossBreakdown", "MetricsMatrix", "Network", "NonFiniteError",
    "ReservoirBuffer", "RunConfig", "TaskStream", "UsageError", "build_split",
    "knn_fit_and_predict", "load_config", "load_grid", "make_blobs",
    "make_conv_net", "make_mlp", "mixup", "sharpen", "softmax",
]
