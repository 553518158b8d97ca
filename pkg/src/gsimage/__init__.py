"""Images as sets of 2D Gaussians: fitting, rendering, quantization and coding."""
from .core import FactorizationKind, GaussianCloud, ImageBuffer, init_cloud
from .raster import RenderConfig, render
from .train import TrainConfig, fit
from .quant import QatConfig, QuantizedCloud, qat_finetune
from .codec import decode, encode
from .metrics import ms_ssim, psnr

__version__ = "0.1.0"

__all__ = [
    "FactorizationKind",
    "GaussianCloud",
    "ImageBuffer",
    "QatConfig",
    "QuantizedCloud",
    "RenderConfig",
    "TrainConfig",
    "decode",
    "encode",
    "fit",
    "init_cloud",
    "ms_ssim",
    "psnr",
    "qat_finetune",
    "render",
]
