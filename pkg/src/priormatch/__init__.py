"""Data-efficient unsupervised domain adaptation for cross-modality image
segmentation: a shared-latent dual-VAE with prior matching, adversarial
training, one-sided cycle-consistency, and a latent-space segmenter."""

from .losses import LossWeights, NonFiniteLossError
from .metrics import MetricsReport, assd, dice_3d, evaluate_scans, largest_component
from .nets import LatentPosterior, NetConfig, NetworkSet, decode, discriminate, encode, sample, segment
from .synthdata import (AugmentationSpec, ConfigurationError, DatasetConfig,
                        Volume, augment, generate_dataset, iterate_batches)
from .trainer import TrainConfig, Trainer, TrainState, adapt, finetune_oracle, infer, train_source

__all__ = [
    "LossWeights", "NonFiniteLossError",
    "MetricsReport", "assd", "dice_3d", "evaluate_scans", "largest_component",
    "LatentPosterior", "NetConfig", "NetworkSet",
    "decode", "discriminate", "encode", "sample", "segment",
    "AugmentationSpec", "ConfigurationError", "DatasetConfig", "Volume",
    "augment", "generate_dataset", "iterate_batches",
    "TrainConfig", "Trainer", "TrainState",
    "adapt", "finetune_oracle", "infer", "train_source",
]
