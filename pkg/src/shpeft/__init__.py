"""Sparsity- and hybridity-inspired selective fine-tuning at desk scale."""

from .autodiff import Tensor, backward_pass, finite_difference_gradient
from .importance import ScoreMap, ScoringConfig, combine_hybrid, hybrid_scores
from .masking import Mask, baseline_mask, select_topk, shpeft_mask
from .models import Model, ModelSpec, WeightBundle, build_model, replace_head
from .trainer import Metrics, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Mask", "Metrics", "Model", "ModelSpec", "ScoreMap", "ScoringConfig", "Tensor", "TrainConfig",
    "WeightBundle", "backward_pass", "baseline_mask", "build_model", "combine_hybrid", "evaluate",
    "finite_difference_gradient", "hybrid_scores", "replace_head", "select_topk", "shpeft_mask", "train",
]
