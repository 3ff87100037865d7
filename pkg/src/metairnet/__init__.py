"""Few-shot image classification with generator-based support-set augmentation
and learned block-wise image fusion."""

from .adapt import AdaptConfig, adapt_generator_to_image, em_regularizer, generator_loss
from .data import ClassSplit, Episode, ImageDataset, build_class_splits, sample_episode
from .errors import ConfigError, DataError, MetaIRNetError, NumericalError
from .fusion import FusionNetwork, augment_support_set, expand_weight_grid, fuse_images
from .protonet import Conv4, compute_prototypes, episode_cross_entropy, query_class_probabilities
from .train import EvalReport, MetaIRNet, TrainConfig, evaluate_model, run_meta_training

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "ClassSplit", "ConfigError", "Conv4", "DataError", "Episode", "EvalReport",
    "FusionNetwork", "ImageDataset", "MetaIRNet", "MetaIRNetError", "NumericalError", "TrainConfig",
    "adapt_generator_to_image", "augment_support_set", "build_class_splits", "compute_prototypes",
    "em_regularizer", "episode_cross_entropy", "evaluate_model", "expand_weight_grid", "fuse_images",
    "generator_loss", "query_class_probabilities", "run_meta_training", "sample_episode",
]
