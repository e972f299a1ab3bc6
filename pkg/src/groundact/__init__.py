"""Desk-scale grounded group activity recognition.

A trainable vision-language encoder / actor-fusion / box-grounding decoder
stack on top of a small reverse-mode autodiff tensor engine, with Hungarian
set matching, L1 + generalized-IoU grounding losses, hierarchical inference,
and the full evaluation-metric suite, exercised on synthetic scenes.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, LossWeights, ModelConfig, TrainConfig
from .model import GroundedModel
from .tensor import Tensor, grad_check
