"""Desk-scale query detector used to exercise the matching schemes end to end."""
from .decoder import ToyDecoder, backward, build_group_mask, collate, forward
from .scenes import SyntheticScene, generate_dataset, generate_scene
from .serialize import load_params, save_params
from .training import EpochLog, ModelParams, OptimizerParams, TrainResult, predict, train, validate, write_log_csv

__all__ = [
    "EpochLog",
    "ModelParams",
    "OptimizerParams",
    "SyntheticScene",
    "ToyDecoder",
    "TrainResult",
    "backward",
    "build_group_mask",
    "collate",
    "forward",
    "generate_dataset",
    "generate_scene",
    "load_params",
    "predict",
    "save_params",
    "train",
    "validate",
    "write_log_csv",
]
