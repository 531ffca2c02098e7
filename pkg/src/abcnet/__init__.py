"""ABC infrared small-target segmentation on a small NumPy autodiff engine."""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SceneSpec, generate_dataset, generate_scene, load_pgm, read_dataset, save_pgm, write_dataset
from .gradcheck import grad_check, run_battery
from .metrics import confusion, evaluate, f1, iou, niou, roc_sweep
from .model import ABC, ABCConfig, count_flops
from .tensor import Tensor, no_grad
from .train import TrainConfig, fit, predict

__version__ = "0.1.0"

__all__ = [
    "ABC",
    "ABCConfig",
    "SceneSpec",
    "Tensor",
    "TrainConfig",
    "confusion",
    "count_flops",
    "evaluate",
    "f1",
    "fit",
    "generate_dataset",
    "generate_scene",
    "grad_check",
    "iou",
    "load_checkpoint",
    "load_pgm",
    "niou",
    "no_grad",
    "predict",
    "read_dataset",
    "roc_sweep",
    "run_battery",
    "save_checkpoint",
    "save_pgm",
    "write_dataset",
]
