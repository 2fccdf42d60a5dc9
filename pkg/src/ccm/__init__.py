"""Contrastive causal model (CCM) for domain generalization at desk scale.

Front-door causal-effect learning over a momentum-updated knowledge queue,
on a small reverse-mode autodiff core and synthetic spurious-shift data.
"""

__version__ = "0.1.0"

from .data import DatasetSpec, DomainData, generate, split_train_val
from .nets import MLPSpec, ModelBundle, init_bundle, momentum_update
from .queue import KnowledgeQueue, new_queue
from .trainer import TrainConfig, evaluate, fit, run_ablation, train_step

__all__ = [
    "DatasetSpec",
    "DomainData",
    "KnowledgeQueue",
    "MLPSpec",
    "ModelBundle",
    "TrainConfig",
    "evaluate",
    "fit",
    "generate",
    "init_bundle",
    "momentum_update",
    "new_queue",
    "run_ablation",
    "split_train_val",
    "train_step",
]
