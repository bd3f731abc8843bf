"""Class activation maps for U-Net segmentation on a small numpy autodiff engine."""

from .autodiff import Tape, Tensor, backward, finite_difference_grad
from .cam import (CamRequest, Heatmap, Method, PixelSet, PixelSetSpec, compute_cam, explain,
                  seg_grad_cam, seg_hires_grad_cam, seg_xres_cam)
from .unet import UNetConfig, UNetModel, build_unet, forward, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward", "finite_difference_grad",
    "CamRequest", "Heatmap", "Method", "PixelSet", "PixelSetSpec", "compute_cam", "explain",
    "seg_grad_cam", "seg_hires_grad_cam", "seg_xres_cam",
    "UNetConfig", "UNetModel", "build_unet", "forward", "load_weights", "save_weights",
]
