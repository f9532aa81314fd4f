"""Fixed-point inference engine: models, gradients, curvature, checkpoints."""

from .quantized import QuantizedTensor, quantize_array
from .layers import AffineNorm, Batch, Conv2d, Dense, MaxPool2, NoiseSpec, QuantizedModel, ReLU
from .functional import (
    backward,
    curvature_diag,
    evaluate,
    forward,
    loss_and_grads,
    activations,
    loss_with_weights,
)
from .checkpoint import load_model, model_from_json, model_to_json, save_model

__all__ = [
    "QuantizedTensor",
    "quantize_array",
    "AffineNorm",
    "Batch",
    "Conv2d",
    "Dense",
    "MaxPool2",
    "NoiseSpec",
    "QuantizedModel",
    "ReLU",
    "backward",
    "curvature_diag",
    "evaluate",
    "forward",
    "loss_and_grads",
    "activations",
    "loss_with_weights",
    "load_model",
    "model_from_json",
    "model_to_json",
    "save_model",
]
