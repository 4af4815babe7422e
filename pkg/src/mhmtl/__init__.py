"""Multi-head multi-task network for ultrasound-style analysis, on a small numpy autodiff engine."""

from .autodiff import Tensor, backward
from .config import RunConfig
from .model import ModelConfig, MultiTaskNet, decode_detection, encode_detection_target
from .tasks import Kind, TaskSpec

__version__ = "0.1.0"

__all__ = [
    "Kind",
    "ModelConfig",
    "MultiTaskNet",
    "RunConfig",
    "TaskSpec",
    "Tensor",
    "backward",
    "decode_detection",
    "encode_detection_target",
]
