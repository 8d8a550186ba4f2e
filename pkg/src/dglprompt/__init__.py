"""Prompt-tuned text-video retrieval on a frozen random dual encoder."""

from .config import PRESETS, ModelConfig
from .model import DGLModel, RetrievalBatch
from .tensor import GradTape, Tensor

__all__ = ["ModelConfig", "PRESETS", "DGLModel", "RetrievalBatch", "GradTape", "Tensor"]
