"""Graph fraud detection with a feature camouflage filter and a
manager-guided mixture-of-experts transformer head."""

from .config import ABLATIONS, PROFILES, TrainConfig, with_ablation
from .fcf import FcfConfig, FilterModel, train_fcf
from .graph import (
    MultiRelationGraph,
    SplitMasks,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    split_nodes,
    write_dataset,
)
from .label_prop import PseudoLabels, propagate_labels
from .pipeline import Detector, RunReport, TrainResult, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS", "PROFILES", "TrainConfig", "with_ablation", "FcfConfig", "FilterModel", "train_fcf",
    "MultiRelationGraph", "SplitMasks", "SyntheticConfig", "generate_synthetic", "load_dataset",
    "split_nodes", "write_dataset", "PseudoLabels", "propagate_labels", "Detector", "RunReport",
    "TrainResult", "evaluate", "train",
]
