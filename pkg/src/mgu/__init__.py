"""Memorization-guided graph unlearning on a from-scratch numpy GCN."""

from .evaluation import EvalReport, build_difficulty_sets, evaluate
from .gcn import ModelParams, TrainConfig, forward, load_model, save_model, train
from .graph import Graph, SbmSpec, UnlearnRequest, apply_request, gen_sbm, load_csv, load_linqs, split
from .memorization import MemConfig, MemTable, estimate_mem
from .unlearn import UnlearnConfig, unlearn_ablation, unlearn_mgu, unlearn_retrain

__all__ = [
    "EvalReport",
    "Graph",
    "MemConfig",
    "MemTable",
    "ModelParams",
    "SbmSpec",
    "TrainConfig",
    "UnlearnConfig",
    "UnlearnRequest",
    "apply_request",
    "build_difficulty_sets",
    "estimate_mem",
    "evaluate",
    "forward",
    "gen_sbm",
    "load_csv",
    "load_linqs",
    "load_model",
    "save_model",
    "split",
    "train",
    "unlearn_ablation",
    "unlearn_mgu",
    "unlearn_retrain",
]
