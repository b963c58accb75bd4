from .model import (ArchitectureSpec, Conv, Dense, Gradients, NetworkError, NetworkParams,
                    Pool, Standardizer, cdnn_spec, classify, confidence, dnn_spec, forward,
                    grad_input, grad_params, hidden_activations, init_params, logits, loss,
                    standardizer_fit)
from .training import TrainConfig, TrainingDivergence, evaluate, fit
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .features import aggregate_activations, features_text, texture_frames

__all__ = [
    "ArchitectureSpec", "Conv", "Dense", "Pool", "Gradients", "NetworkError",
    "NetworkParams", "Standardizer", "cdnn_spec", "dnn_spec", "classify", "confidence",
    "forward", "grad_input", "grad_params", "hidden_activations", "init_params",
    "logits", "loss", "standardizer_fit", "TrainConfig", "TrainingDivergence",
    "evaluate", "fit", "CheckpointError", "load_checkpoint", "save_checkpoint",
    "aggregate_activations", "features_text", "texture_frames",
]
