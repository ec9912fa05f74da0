"""Weakly supervised video moment retrieval on a small numpy autodiff engine."""

from .config import ModelConfig, RunConfig, SyntheticSpec, load_config
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    MomentGraphError,
    NumericError,
)
from .model import init_params, pair_forward, similarity_grid, video_query_similarity
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "FormatError",
    "ModelConfig",
    "MomentGraphError",
    "NumericError",
    "RunConfig",
    "SyntheticSpec",
    "Tensor",
    "init_params",
    "load_config",
    "no_grad",
    "pair_forward",
    "similarity_grid",
    "video_query_similarity",
]
