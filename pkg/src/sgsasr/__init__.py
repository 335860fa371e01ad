"""Saliency-guided arbitrary-scale super-resolution for spacecraft images."""
from .config import ModelConfig, RunConfig, TrainConfig
from .model import SGSASR, build_model, load_checkpoint, save_checkpoint

__all__ = ["ModelConfig", "RunConfig", "TrainConfig", "SGSASR", "build_model",
           "load_checkpoint", "save_checkpoint"]
__version__ = "0.1.0"
