"""Desk-scale simulator of personalized federated weakly-supervised segmentation
with learnable prompts and learnable aggregation."""
from .kernels import BACKEND as KERNEL_BACKEND
from .model import SegModel, build_model
from .protocol import FedConfig, run_federation
from .synth import SiteSpec, default_4site_config, generate_federation, load_federation
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "FedConfig",
    "SegModel",
    "SiteSpec",
    "Tensor",
    "build_model",
    "default_4site_config",
    "generate_federation",
    "load_federation",
    "no_grad",
    "run_federation",
]
