from . import autograd
from .autograd import Tape, Var
from .checkpoint import CheckpointError
from .nn import DenseLayer, ShapeError, mlp_forward
from .optim import AdamState, TrainingError, adam_step, learning_rate

__all__ = [
    "AdamState",
    "CheckpointError",
    "DenseLayer",
    "ShapeError",
    "Tape",
    "TrainingError",
    "Var",
    "adam_step",
    "autograd",
    "learning_rate",
    "mlp_forward",
]
