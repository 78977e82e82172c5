"""Multi-instance self-supervised pre-training on synthetic scenes, in numpy."""

from .boxes import Box, FilterConfig, contains, intersect, iou
from .kernels import backend
from .losses import LossSwitches, univip_objective
from .model import ArchConfig, ModelState, ema_update, load_checkpoint, save_checkpoint
from .ot import sinkhorn
from .tensor import NumericError, Tensor
from .views import create_overlapping_views

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "Box", "FilterConfig", "LossSwitches", "ModelState", "NumericError", "Tensor",
    "backend", "contains", "create_overlapping_views", "ema_update", "intersect", "iou",
    "load_checkpoint", "save_checkpoint", "sinkhorn", "univip_objective",
]
