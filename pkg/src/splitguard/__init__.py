"""Private edge-cloud split learning with clip + Laplace feature release and attack evaluation."""

from .attacks import WhiteBoxConfig, attack_epoch, make_attack_state, whitebox_reconstruct
from .datasets import DatasetBundle, SyntheticAttributeSpec, generate_synthetic, load_external, trivial_classifier
from .errors import ConfigError, DivergenceError, NumericError, ProtocolError, SchemaError, SplitGuardError, TransportError
from .metrics import accuracy, psnr, similarity_report, ssim
from .models import ArchitectureSpec, SplitModel, count_parameters, estimate_maccs, load_checkpoint, save_checkpoint
from .privacy import PrivacyConfig, clip_per_sample, dp_ratio_test, laplace_noise
from .training import TrainConfig, pretrain_edge, train_baseline, train_edge_cloud

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "ConfigError",
    "DatasetBundle",
    "DivergenceError",
    "NumericError",
    "PrivacyConfig",
    "ProtocolError",
    "SchemaError",
    "SplitGuardError",
    "SplitModel",
    "SyntheticAttributeSpec",
    "TrainConfig",
    "TransportError",
    "WhiteBoxConfig",
    "accuracy",
    "attack_epoch",
    "clip_per_sample",
    "count_parameters",
    "dp_ratio_test",
    "estimate_maccs",
    "generate_synthetic",
    "laplace_noise",
    "load_checkpoint",
    "load_external",
    "make_attack_state",
    "pretrain_edge",
    "psnr",
    "save_checkpoint",
    "similarity_report",
    "ssim",
    "train_baseline",
    "train_edge_cloud",
    "trivial_classifier",
    "whitebox_reconstruct",
]
