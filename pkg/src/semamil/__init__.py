"""Semantic reordering + query-conditioned state-space scanning for
multiple-instance bag classification, with a synthetic-bag train/eval
harness."""

from .bagdata import (Bag, BagFormatError, Dataset, SplitPlan, SynthConfig,
                      generate_synthetic, load_bag, load_dataset, save_bag,
                      save_dataset, split_monte_carlo)
from .model import (ModelConfig, SemaMILModel, count_flops, count_params,
                    forward, load_checkpoint, save_checkpoint)
from .harness import (Metrics, TrainConfig, auc_score, cross_entropy,
                      evaluate, run_ablation, semamil_protocol, train_fold)

__all__ = [
    "Bag", "BagFormatError", "Dataset", "SplitPlan", "SynthConfig",
    "generate_synthetic", "load_bag", "load_dataset", "save_bag",
    "save_dataset", "split_monte_carlo",
    "ModelConfig", "SemaMILModel", "count_flops", "count_params", "forward",
    "load_checkpoint", "save_checkpoint",
    "Metrics", "TrainConfig", "auc_score", "cross_entropy", "evaluate",
    "run_ablation", "semamil_protocol", "train_fold",
]

__version__ = "0.1.0"
