"""FaceLiVT inference toolkit: numpy forward executors, structural reparameterization,
parameter / MAdds accounting and a weight-file CLI."""
from .analysis import CostReport, count_madds, count_params, cross_check, eval_complexity
from .blocks import Form
from .errors import AlreadyFusedError, ConfigError, FaceLiVTError, NonFiniteError, ShapeError, WeightFileError
from .model import (
    VARIANTS, ModelGraph, VariantConfig, build, build_ablation, build_calibrated, calibrate_bn,
    forward, sample_inputs, shape_trace, variant,
)
from .reparam import FusionReport, fuse_model, fuse_weights
from .weights import load, save

__version__ = "0.1.0"

__all__ = [
    "AlreadyFusedError", "ConfigError", "CostReport", "FaceLiVTError", "Form", "FusionReport",
    "ModelGraph", "NonFiniteError", "ShapeError", "VARIANTS", "VariantConfig", "WeightFileError",
    "build", "build_ablation", "build_calibrated", "calibrate_bn", "count_madds", "count_params",
    "cross_check", "eval_complexity", "forward", "fuse_model", "fuse_weights", "load",
    "sample_inputs", "save", "shape_trace", "variant",
]
