"""Segment-align-score severity grading of chest radiographs, on a small numpy autodiff engine."""
from .network import BSNet, ModelConfig, AttentionMode, forward_full, predict_score, ensemble
from .tensor import ContractError, DimensionError, Tensor, backward, check_mode, no_grad

__all__ = [
    "AttentionMode",
    "BSNet",
    "ContractError",
    "DimensionError",
    "ModelConfig",
    "Tensor",
    "backward",
    "check_mode",
    "ensemble",
    "forward_full",
    "no_grad",
    "predict_score",
]
