"""Exposure correction with Retinex guidance and feature-ordered selective state-space scans."""

from .autodiff import ContractError, Tensor, backward, gradcheck, no_grad
from .io import load_model, read_png, save_model, write_png
from .metrics import psnr, ssim
from .network import ECMamba, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "ECMamba",
    "ModelConfig",
    "Tensor",
    "backward",
    "gradcheck",
    "load_model",
    "no_grad",
    "psnr",
    "read_png",
    "save_model",
    "ssim",
    "write_png",
]
