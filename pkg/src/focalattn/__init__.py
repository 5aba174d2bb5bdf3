"""Depth and all-in-focus estimation from focal stacks with one shared attention volume."""

from .autodiff import Tensor, backward, grad_check
from .defocus import Scene, render_slice, synth_stack
from .fusion import expected_depth, fuse_aif, softmax_normalize, softplus_normalize
from .net import ModelConfig, build_model, forward, infer, load_checkpoint, save_checkpoint
from .objectives import baseline_argmax_dff, compute_metrics
from .stack import FocalStack, FocusAxis, Sample
from .stackio import gen_toy_dataset, load_dataset, manifest_load, toy_samples
from .training import TrainConfig, evaluate, test_time_optimize, train

__all__ = [
    "FocalStack",
    "FocusAxis",
    "ModelConfig",
    "Sample",
    "Scene",
    "Tensor",
    "TrainConfig",
    "backward",
    "baseline_argmax_dff",
    "build_model",
    "compute_metrics",
    "evaluate",
    "expected_depth",
    "forward",
    "fuse_aif",
    "gen_toy_dataset",
    "grad_check",
    "infer",
    "load_checkpoint",
    "load_dataset",
    "manifest_load",
    "render_slice",
    "save_checkpoint",
    "softmax_normalize",
    "softplus_normalize",
    "synth_stack",
    "test_time_optimize",
    "toy_samples",
    "train",
]

__version__ = "0.1.0"
