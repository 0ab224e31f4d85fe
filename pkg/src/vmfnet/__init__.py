"""Compositional segmentation with learnable von-Mises-Fisher kernels."""

__version__ = "0.1.0"

from .networks import EncoderConfig, ModelConfig, VMFNet  # noqa: E402
from .vmf import (  # noqa: E402
    KernelBank,
    normalize_features,
    project_kernels,
    recompose,
    vmf_likelihoods,
    vmf_loss,
)

__all__ = [
    "EncoderConfig",
    "KernelBank",
    "ModelConfig",
    "VMFNet",
    "normalize_features",
    "project_kernels",
    "recompose",
    "vmf_likelihoods",
    "vmf_loss",
]
