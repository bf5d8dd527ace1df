"""flatcomp: train flat, then compress.

A small numpy lab for sharpness-aware training, magnitude pruning and
lottery tickets, structured L0 pruning with distillation, int8 dynamic
quantization and flatness measurement.
"""

from .datasets import TaskSpec, generate
from .kernels import BACKEND
from .models import ModelSpec, ParamStore, build_model, evaluate, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = ["BACKEND", "ModelSpec", "ParamStore", "TaskSpec", "TrainConfig", "build_model", "evaluate",
           "generate", "load_checkpoint", "save_checkpoint", "train", "__version__"]
