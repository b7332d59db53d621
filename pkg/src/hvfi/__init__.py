"""Hierarchical deformable-kernel video frame interpolation (numpy, CPU)."""

from .autodiff import Tape, Tensor, backward, no_grad
from .deformconv import DeformableKernel, base_grid, deform_conv
from .hvit import HVIT, HVITBConfig, HVITB
from .pipeline import HVFIModel, ModelConfig, update_dek, upscale_dek
from .train import TrainConfig, load_model

__all__ = [
    "Tape", "Tensor", "backward", "no_grad",
    "DeformableKernel", "base_grid", "deform_conv",
    "HVIT", "HVITB", "HVITBConfig",
    "HVFIModel", "ModelConfig", "update_dek", "upscale_dek",
    "TrainConfig", "load_model",
]

__version__ = "0.1.0"
