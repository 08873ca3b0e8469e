"""Differentiable speaker-embedding model: forward, gradients, training, storage."""

from .net import (
    Embedding,
    GradientTape,
    ModelParams,
    backward_batch,
    cosine_score,
    cosine_scores_and_grads,
    forward,
    forward_batch,
    init_params,
    input_gradient,
)
from .store import ModelFormatError, load_model, model_hash, save_model
from .train import calibrate_threshold, enrollment_embedding, score_trials, train

__all__ = [
    "Embedding",
    "GradientTape",
    "ModelFormatError",
    "ModelParams",
    "backward_batch",
    "calibrate_threshold",
    "cosine_score",
    "cosine_scores_and_grads",
    "enrollment_embedding",
    "forward",
    "forward_batch",
    "init_params",
    "input_gradient",
    "load_model",
    "model_hash",
    "save_model",
    "score_trials",
    "train",
]
