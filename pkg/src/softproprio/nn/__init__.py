from .estimator import ShapeReconstructor
from .model import EncoderDecoder, ModelConfig, ModelError, build_model, load_weights, save_weights
from .tensor import AutodiffError, Tensor, chamfer_loss
from .train import AdamState, GradCamMap, History, TrainConfig, adam_step, evaluate_loss, grad_cam, train

__all__ = [
    "AdamState", "AutodiffError", "EncoderDecoder", "GradCamMap", "History", "ModelConfig", "ModelError",
    "ShapeReconstructor", "Tensor", "TrainConfig", "adam_step", "build_model", "chamfer_loss",
    "evaluate_loss", "grad_cam", "load_weights", "save_weights", "train",
]
