"""Desk-scale iterative semantic-reconstruction anomaly detection on numpy."""

from .config import Config, load_config
from .harness import grad_check, loop_ablation, run_protocol
from .nn import SirModel, loop_forward, teacher_forward, training_loss
from .optim import Adam
from .scoring import anomaly_maps, auroc, percentile
from .tensor import Tape, Tensor

__all__ = [
    "Adam",
    "Config",
    "SirModel",
    "Tape",
    "Tensor",
    "anomaly_maps",
    "auroc",
    "grad_check",
    "load_config",
    "loop_ablation",
    "loop_forward",
    "percentile",
    "run_protocol",
    "teacher_forward",
    "training_loss",
]

__version__ = "0.1.0"
