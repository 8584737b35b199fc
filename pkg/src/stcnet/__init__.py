"""Skeleton action recognition with spatio-temporal curves and dilated graph kernels."""

from .errors import ConfigError, FormatError, NumericError, ShapeError, StructuralError
from .graph import (
    AdjacencyKernelSet,
    SkeletonGraph,
    dilated_adjacency,
    kernel_set,
    lambda_binarize,
    normalize_adjacency,
    ntu_graph,
    partition_adjacency,
)
from .model import ModelConfig, STCNet, build_model, count_flops, count_params, load_checkpoint, save_checkpoint
from .nn import RngStream
from .stc import CurveSet, StcConfig

__version__ = "0.1.0"
