"""Classifier-guided gradient modulation for multimodal training, on a small autodiff engine."""

from .cggm import BalancingTerms, CggmConfig, TrainRecord, balancing_terms, direction_loss, training_step
from .data import Dataset, SyntheticSpec, generate
from .metrics import MetricState
from .model import ModelConfig, MultimodalModel
from .optim import Optimizer, OptimizerConfig
from .tensor import Tensor

__version__ = "0.1.0"
