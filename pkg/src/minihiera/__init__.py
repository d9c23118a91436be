"""Hierarchical vision transformer with mask-unit attention and sparse MAE pretraining, in numpy."""

from .config import DecoderConfig, HieraConfig, Ladder, tiny, variant
from .cost import count_flops, count_params, cost_report
from .layout import MaskSpec, build_layout, sample_mask
from .mae import MaskedAutoencoder, mae_loss
from .model import HieraClassifier, HieraEncoder
from .tensor import Tensor, grad_check, no_grad

__all__ = [
    "DecoderConfig",
    "HieraClassifier",
    "HieraConfig",
    "HieraEncoder",
    "Ladder",
    "MaskSpec",
    "MaskedAutoencoder",
    "Tensor",
    "build_layout",
    "cost_report",
    "count_flops",
    "count_params",
    "grad_check",
    "mae_loss",
    "no_grad",
    "sample_mask",
    "tiny",
    "variant",
]
__version__ = "0.1.0"
