"""Siamese pyramid-transformer change detection with progressive fusion and
edge-aware agent-attention focusing."""

__version__ = "0.1.0"

from .config import DcfmConfig, EncoderConfig, ModelConfig, TrainConfig
from .data import BitemporalPair, DatasetSplit, synthesize_dataset
from .decoder import ChangeDetector, full_forward
from .metrics import ConfusionCounts, bce_loss, confusion_counts, metrics_from_counts
from .train import Checkpoint, evaluate, train

__all__ = [
    "BitemporalPair",
    "ChangeDetector",
    "Checkpoint",
    "ConfusionCounts",
    "DatasetSplit",
    "DcfmConfig",
    "EncoderConfig",
    "ModelConfig",
    "TrainConfig",
    "bce_loss",
    "confusion_counts",
    "evaluate",
    "full_forward",
    "metrics_from_counts",
    "synthesize_dataset",
    "train",
]
