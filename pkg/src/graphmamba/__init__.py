"""Graph-tokenized state-space classifier for hyperspectral patches."""

from graphmamba.data import (
    HsiCube,
    PatchSet,
    SplitSpec,
    extract_patches,
    generate_synthetic,
    load_cube,
    save_cube,
    stratified_split,
)
from graphmamba.estimator import GraphMambaClassifier
from graphmamba.model import ModelConfig, ModelParams, forward, init_params
from graphmamba.resources import count_params, estimate_flops, estimate_memory
from graphmamba.training import Metrics, TrainConfig, evaluate, predict_map, train

__version__ = "0.1.0"

__all__ = [
    "GraphMambaClassifier",
    "HsiCube",
    "Metrics",
    "ModelConfig",
    "ModelParams",
    "PatchSet",
    "SplitSpec",
    "TrainConfig",
    "count_params",
    "estimate_flops",
    "estimate_memory",
    "evaluate",
    "extract_patches",
    "forward",
    "generate_synthetic",
    "init_params",
    "load_cube",
    "predict_map",
    "save_cube",
    "stratified_split",
    "train",
]
