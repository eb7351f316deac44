"""Similarity-based knowledge distillation for lightweight vessel segmentation.

The package trains a heavyweight attention U-Net teacher on synthetic
angiogram-like images, then transfers its representation to compact
students through two latent-similarity losses on pooled encoder and
decoder features, alongside the ordinary pixel loss.
"""

__version__ = "0.1.0"

from .errors import (CheckpointCorruptError, CheckpointError,
                     CheckpointIncompatibleError, ConfigError,
                     DegenerateLatentError, NumericError, ShapeError,
                     UnsupportedLayerError)
from .synthdata import (AngiogramSample, DatasetSplit, SynthConfig, augment,
                        build_split, crop_patches, generate_image, load_corpus,
                        save_corpus, split_parent_ids)
from .distill import (LossWeights, Projector, asd_loss, ce_loss,
                      euclidean_similarity, fsd_loss, latent_similarity,
                      pool_features, project, reconstruction_loss,
                      softkd_loss, total_loss)
from .nets import (NetworkSpec, SegmentationNetwork, TapBundle, build_network,
                   init_parameters, preset)
from .evaluate import (ConfusionCounts, MetricsReport, accuracy, auc,
                       confusion, count_flops, count_params, evaluate_model,
                       f1, miou, read_metrics_csv, render_overlay,
                       sensitivity, write_metrics_csv, write_report)
from .train import (TrainConfig, build_from_checkpoint, config_hash, distill,
                    load_checkpoint, run_training, save_checkpoint,
                    state_checksum, train_scratch, train_teacher)

__all__ = [
    "__version__",
    # errors
    "ConfigError", "ShapeError", "NumericError", "DegenerateLatentError",
    "CheckpointError", "CheckpointCorruptError", "CheckpointIncompatibleError",
    "UnsupportedLayerError",
    # synthetic data
    "SynthConfig", "AngiogramSample", "DatasetSplit", "generate_image",
    "crop_patches", "augment", "split_parent_ids", "build_split",
    "save_corpus", "load_corpus",
    # distillation losses
    "LossWeights", "Projector", "pool_features", "project",
    "reconstruction_loss", "latent_similarity", "fsd_loss",
    "euclidean_similarity", "asd_loss", "ce_loss", "total_loss",
    "softkd_loss",
    # networks
    "NetworkSpec", "TapBundle", "SegmentationNetwork", "build_network",
    "init_parameters", "preset",
    # evaluation
    "ConfusionCounts", "confusion", "accuracy", "sensitivity", "f1", "miou",
    "auc", "count_params", "count_flops", "MetricsReport", "evaluate_model",
    "write_metrics_csv", "read_metrics_csv", "render_overlay", "write_report",
    # training
    "TrainConfig", "config_hash", "state_checksum", "save_checkpoint",
    "load_checkpoint", "build_from_checkpoint", "run_training",
    "train_teacher", "train_scratch", "distill",
]
