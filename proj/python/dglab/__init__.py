"""Gradient-gated teacher-student domain generalization core."""

from ._dglab import (
    ConfigError,
    DegenerateInputError,
    InternalError,
    TrainingAborted,
    __version__,
    boundary_extract,
    build_dataset,
    contrastive_loss,
    dce_loss,
    domain_overlap_score,
    ema_update,
    evaluate,
    gate,
    generate_phantom,
    segmentation_metrics,
    train,
)

__all__ = [
    "ConfigError",
    "DegenerateInputError",
    "InternalError",
    "TrainingAborted",
    "__version__",
    "boundary_extract",
    "build_dataset",
    "contrastive_loss",
    "dce_loss",
    "domain_overlap_score",
    "ema_update",
    "evaluate",
    "gate",
    "generate_phantom",
    "segmentation_metrics",
    "train",
]
