"""Intra-class adaptive augmentation for metric learning, in embedding space."""

__version__ = "0.1.0"

from .augment import AugmentConfig, SyntheticBatch, generate, generate_dynamic, generate_fixed
from .core import Dataset, build_class_index, cosine_similarity, euclidean_distance, l2_normalize, load_dataset, save_dataset
from .correction import CorrectionConfig, alpha, correct_covariance, neighbor_covariance, neighbor_set, neighbor_weight
from .correlation import DistanceMetricConfig, correlation_report, cov_distance, mean_distance, spearman
from .errors import ConfigError, DataError, IAAError, NumericalError
from .evaluation import evaluate, map_at_r, r_precision, recall_at_k, similarity_histogram
from .losses import Batch, LossConfig, compute_loss, contrastive_iaa, ms_iaa, triplet_iaa
from .stats import ClassStats, GlobalStats, estimate_class_stats, estimate_global_covariance
from .trainer import Encoder, TrainConfig, train
from .world import make_synthetic_world

__all__ = [
    "__version__",
    "AugmentConfig",
    "SyntheticBatch",
    "generate",
    "generate_dynamic",
    "generate_fixed",
    "Dataset",
    "build_class_index",
    "cosine_similarity",
    "euclidean_distance",
    "l2_normalize",
    "load_dataset",
    "save_dataset",
    "CorrectionConfig",
    "alpha",
    "correct_covariance",
    "neighbor_covariance",
    "neighbor_set",
    "neighbor_weight",
    "DistanceMetricConfig",
    "correlation_report",
    "cov_distance",
    "mean_distance",
    "spearman",
    "ConfigError",
    "DataError",
    "IAAError",
    "NumericalError",
    "evaluate",
    "map_at_r",
    "r_precision",
    "recall_at_k",
    "similarity_histogram",
    "Batch",
    "LossConfig",
    "compute_loss",
    "contrastive_iaa",
    "ms_iaa",
    "triplet_iaa",
    "ClassStats",
    "GlobalStats",
    "estimate_class_stats",
    "estimate_global_covariance",
    "Encoder",
    "TrainConfig",
    "train",
    "make_synthetic_world",
]
