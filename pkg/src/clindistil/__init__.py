"""Compact clinical encoders: distillation, continual pre-training, evaluation and profiling."""

from .models import ArchitectureDescriptor, EncoderModel, build_model, count_parameters, preset
from .tensor import Tensor, no_grad

__all__ = ["ArchitectureDescriptor", "EncoderModel", "Tensor", "build_model", "count_parameters", "no_grad",
           "preset"]
__version__ = "0.1.0"
