"""Conditional multi-mode smile generation on landmark sequences."""
from .checkpoint import ModelConfig, ModelState, load_checkpoint, save_checkpoint
from .errors import SmileGenError

__version__ = "0.1.0"

__all__ = ["ModelConfig", "ModelState", "SmileGenError", "load_checkpoint", "save_checkpoint"]
