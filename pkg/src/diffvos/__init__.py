"""Referring video object segmentation on frozen video-diffusion features.

The package splits into a generative backbone (frame codec + denoising
U-Net, pretrained once and then frozen) and the trainable referring parts
(prompt projection, noise prediction, query-based mask head).
"""

__version__ = "0.1.0"

from .model import RvosModel, frozen_checksums, load_checkpoint, param_checksum, save_checkpoint

__all__ = [
    "RvosModel",
    "frozen_checksums",
    "load_checkpoint",
    "param_checksum",
    "save_checkpoint",
    "__version__",
]
