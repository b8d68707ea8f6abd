"""Spatially agnostic and spatially aware spatio-temporal forecasters on a small autodiff core."""

from .models import AGNOSTIC_KINDS, KINDS, PAIRS, TRADITIONAL_KINDS, ModelConfig, build_model
from .tensor import Tensor, backward, gradcheck, no_grad

__all__ = ["AGNOSTIC_KINDS", "KINDS", "PAIRS", "TRADITIONAL_KINDS", "ModelConfig", "Tensor",
           "backward", "build_model", "gradcheck", "no_grad"]
__version__ = "0.1.0"
