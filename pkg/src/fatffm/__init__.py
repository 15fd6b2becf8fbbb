"""Field-aware factorization CTR models with CENet-style field attention."""

from .data import Dataset, Instance, RawInstance, Vocabulary, synth_generate
from .diffcore import AdamState, adam_step, grad_check, rng_stream
from .model import Model, ModelSpec, load_checkpoint, save_checkpoint
from .train import EvalReport, TrainConfig, auc, evaluate, logloss, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Dataset",
    "EvalReport",
    "Instance",
    "Model",
    "ModelSpec",
    "RawInstance",
    "TrainConfig",
    "Vocabulary",
    "adam_step",
    "auc",
    "evaluate",
    "grad_check",
    "load_checkpoint",
    "logloss",
    "rng_stream",
    "run_ablation",
    "save_checkpoint",
    "synth_generate",
    "train",
]
