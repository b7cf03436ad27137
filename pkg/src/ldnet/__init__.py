"""LDNet: lane segmentation for event-camera frames.

Encoder with DropBlock regularization, a summed multi-rate dilated
convolution core, and an attention-gated decoder, built on a small
reverse-mode autodiff engine (numpy-backed, CPU only).
"""

from .tensor import Tensor, finite_difference_check, finite_difference_check_params, no_grad
from .model import (
    LdnetConfig,
    LdnetParams,
    load_checkpoint,
    param_count,
    read_checkpoint_config,
    save_checkpoint,
)
from .training import AdamState, TrainConfig, adam_step, evaluate, fit, kp_schedule, poly_lr
from .metrics import ConfusionCounts, MetricsReport, mean_report, reports_to_json
from .data import SegmentationSample, SplitSpec, load_dataset, split_dataset, synth_scene

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "finite_difference_check",
    "finite_difference_check_params",
    "LdnetConfig",
    "LdnetParams",
    "param_count",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_config",
    "TrainConfig",
    "AdamState",
    "adam_step",
    "poly_lr",
    "kp_schedule",
    "fit",
    "evaluate",
    "ConfusionCounts",
    "MetricsReport",
    "mean_report",
    "reports_to_json",
    "SegmentationSample",
    "SplitSpec",
    "load_dataset",
    "split_dataset",
    "synth_scene",
    "__version__",
]
