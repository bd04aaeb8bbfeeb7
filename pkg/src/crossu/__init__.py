"""Desk-scale text-to-image flow matching with a cross-attention U-transformer.

The pieces compose left to right: `datapipe` turns images into normalized
crops with position maps, `geometry` owns the aspect-constrained coordinate
system and rotary embeddings, `model` is the backbone, `routing` handles
token bypass and guidance, `flow` the training loss and Euler sampler,
`training` the loop and checkpoints, and `verify` the fast invariant suite.
"""

from .config import OptimizerConfig, RunConfig, ScheduleConfig, load_config
from .datapipe import DatasetSpec, inference_position_map, read_png, write_png
from .errors import CrossUError
from .flow import SamplerConfig, euler_sample, fm_loss
from .geometry import CameraTransform, compute_ranges, make_position_map
from .model import CrossUTransformer, ModelConfig, PRESETS, derived_counts
from .routing import GuidanceSpec, TRAINING_ROUTE_RATE, make_route_mask
from .textcond import ToyCausalEncoder, ToyTokenizer
from .training import TrainState, load_checkpoint, save_checkpoint, train, train_step
from .verify import fd_gradient_errors, run_checks

__version__ = "0.1.0"

__all__ = [
    "CameraTransform",
    "CrossUError",
    "CrossUTransformer",
    "DatasetSpec",
    "GuidanceSpec",
    "ModelConfig",
    "OptimizerConfig",
    "PRESETS",
    "RunConfig",
    "SamplerConfig",
    "ScheduleConfig",
    "TRAINING_ROUTE_RATE",
    "ToyCausalEncoder",
    "ToyTokenizer",
    "TrainState",
    "compute_ranges",
    "derived_counts",
    "euler_sample",
    "fd_gradient_errors",
    "fm_loss",
    "inference_position_map",
    "load_checkpoint",
    "load_config",
    "make_position_map",
    "make_route_mask",
    "read_png",
    "run_checks",
    "save_checkpoint",
    "train",
    "train_step",
    "write_png",
]
