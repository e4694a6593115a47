"""Desk-scale semi-supervised binary segmentation via prototype alignment.

The package bundles a small reverse-mode autodiff core, a compact
encoder-decoder segmentation network, prototype-based consistency losses
with vote-fused pseudo-labels, a synthetic blob dataset, and a
training/evaluation harness with a four-row loss ablation.
"""

from .data import Sample, SplitSpec, augment, generate_dataset, generate_synthetic, load_pair_dir, split
from .evaluate import ablate, confusion, evaluate_checkpoint, evaluate_params, metrics_from_counts
from .losses import LossBundle, LossToggles, RampSchedule, ramp_weight
from .net import NetDescriptor, forward, init_params
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, load_checkpoint, run, save_checkpoint, train_step

__version__ = "0.1.0"

__all__ = [
    "Sample",
    "SplitSpec",
    "augment",
    "generate_dataset",
    "generate_synthetic",
    "load_pair_dir",
    "split",
    "ablate",
    "confusion",
    "evaluate_checkpoint",
    "evaluate_params",
    "metrics_from_counts",
    "LossBundle",
    "LossToggles",
    "RampSchedule",
    "ramp_weight",
    "NetDescriptor",
    "forward",
    "init_params",
    "Tensor",
    "backward",
    "no_grad",
    "TrainConfig",
    "load_checkpoint",
    "run",
    "save_checkpoint",
    "train_step",
    "__version__",
]
