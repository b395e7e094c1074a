"""Gated recurrent networks with hand-derived BPTT.

Covers the standard GRU, the reset-free M-GRU, the M-reluGRU (no reset
gate, ReLU candidate, batch normalized) and LSTM / ReLU-RNN baselines.
"""

from .cells import CellKind, CellParams, param_count
from .data import Dataset, gen_adding_problem, gen_framewise_task, load_checkpoint, \
    load_dataset, save_checkpoint, save_dataset
from .layers import BatchNorm, ModelStack, SequenceBatch, softmax_xent_loss, stack_forward
from .numeric import Rng
from .training import TrainConfig, grad_check, train_model

__version__ = "0.1.0"

__all__ = [
    "BatchNorm", "CellKind", "CellParams", "Dataset", "ModelStack", "Rng", "SequenceBatch",
    "TrainConfig", "gen_adding_problem", "gen_framewise_task", "grad_check",
    "load_checkpoint", "load_dataset", "param_count", "save_checkpoint", "save_dataset",
    "softmax_xent_loss", "stack_forward", "train_model",
]
