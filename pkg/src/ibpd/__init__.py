"""Conditional VAE whose confounder code is gated by a truncated Indian buffet process.

The task encoder, the stick-breaking binary features Z and continuous
features A, the decoder, the training loop and the post-hoc analyses are
all built on a small reverse-mode autodiff core over numpy arrays.
"""

from .ibp import IBPConfig, expected_active, sample_prior, sticks_to_pi
from .model import CIBPVAE, CVAE, Classifier, ModelConfig, build_classifier_baseline, build_cvae_baseline, build_model
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CIBPVAE",
    "CVAE",
    "Classifier",
    "IBPConfig",
    "ModelConfig",
    "TrainConfig",
    "build_classifier_baseline",
    "build_cvae_baseline",
    "build_model",
    "evaluate",
    "expected_active",
    "load_checkpoint",
    "sample_prior",
    "save_checkpoint",
    "sticks_to_pi",
    "train",
]
