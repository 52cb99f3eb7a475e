"""Resolution-switchable image classifiers with multi-resolution ensemble distillation."""

from .model import (ARCHS, BatchNormBank, ResolutionProfile, SwitchableClassifier, batchnorm_apply,
                    build_model, count_parameters, forward, interpolate_bn_bank)
from .madds import MAddsReport, count_madds
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .losses import (LossBreakdown, classification_loss, distillation_loss, distillation_loss_full,
                     distillation_loss_vanilla, ensemble_logit, ensemble_loss, kl_divergence,
                     softmax_probs, total_loss)
from .trainer import TrainConfig, cosine_lr, train, train_step

__version__ = "0.1.0"

__all__ = [
    "ARCHS", "BatchNormBank", "ResolutionProfile", "SwitchableClassifier", "batchnorm_apply", "build_model",
    "count_parameters", "forward", "interpolate_bn_bank", "MAddsReport", "count_madds", "CheckpointError",
    "load_checkpoint", "save_checkpoint", "LossBreakdown", "classification_loss", "distillation_loss",
    "distillation_loss_full", "distillation_loss_vanilla", "ensemble_logit", "ensemble_loss", "kl_divergence",
    "softmax_probs", "total_loss", "TrainConfig", "cosine_lr", "train", "train_step",
]
