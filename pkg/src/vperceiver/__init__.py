"""Visual Perceiver image classifier with query-masked training and
dynamic query selection at inference time."""

from .model import ModelConfig, ParamStore, count_params, forward, init_params
from .masking import MaskSchedule, SelectionResult, dqs_forward, dqs_select, sample_k
from .train import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train_loop
from .profiler import FlopBreakdown, flop_model

__all__ = [
    "ModelConfig", "ParamStore", "count_params", "forward", "init_params",
    "MaskSchedule", "SelectionResult", "dqs_forward", "dqs_select", "sample_k",
    "Checkpoint", "TrainConfig", "load_checkpoint", "save_checkpoint", "train_loop",
    "FlopBreakdown", "flop_model",
]
