"""attn_export: capture diffusion UNet attention into bundle files."""

from .capture import AttentionStore
from .errors import CaptureShapeError, ExportError, ExportStartupError
from .export import (DEFAULT_RESOLUTIONS, DEFAULT_TIMESTEPS, ExportJob,
                     export_bundle, tokenize)
from .model import MiniUNet, build_model

__version__ = "0.1.0"

__all__ = [
    "AttentionStore",
    "CaptureShapeError",
    "DEFAULT_RESOLUTIONS",
    "DEFAULT_TIMESTEPS",
    "ExportError",
    "ExportJob",
    "ExportStartupError",
    "MiniUNet",
    "build_model",
    "export_bundle",
    "tokenize",
]
