"""grouptune: semi-supervised fine-tuning with group-contrast exploration.

Trains a classifier from a small labeled set plus a large unlabeled set by
combining cross-entropy on the labeled data with a group-contrast loss that
attracts each query embedding to a per-class FIFO queue of key embeddings,
selected by ground-truth label (labeled stream) or pseudo-label (unlabeled
stream). Baseline objectives (threshold pseudo-labeling, instance-level
contrast, plain fine-tuning) and ablation switches are included, along with
a CLI for running experiments, ablations, and sensitivity sweeps.
"""

from grouptune.keystore import KeyStore
from grouptune.losses import (
    ContrastInstance,
    LossReport,
    cross_entropy,
    info_nce,
    pgc,
    pgc_labeled,
    pseudo_ce,
    total_objective,
)
from grouptune.model import ModelBundle, PseudoLabel, make_bundle
from grouptune.datagen import (
    AugmentationPolicy,
    Dataset,
    SplitData,
    make_gaussian_mixture,
    split_label_proportion,
    split_per_class_count,
    two_views,
)
from grouptune.trainer import (
    TrainConfig,
    TrainReport,
    run_ablation_suite,
    run_sensitivity_sweep,
    train,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "KeyStore",
    "ContrastInstance",
    "LossReport",
    "cross_entropy",
    "pseudo_ce",
    "info_nce",
    "pgc",
    "pgc_labeled",
    "total_objective",
    "ModelBundle",
    "PseudoLabel",
    "make_bundle",
    "Dataset",
    "SplitData",
    "AugmentationPolicy",
    "make_gaussian_mixture",
    "split_label_proportion",
    "split_per_class_count",
    "two_views",
    "TrainConfig",
    "TrainReport",
    "train",
    "train_step",
    "run_ablation_suite",
    "run_sensitivity_sweep",
]
