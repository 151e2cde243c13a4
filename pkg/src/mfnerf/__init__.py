"""Mixed-feature hash encoding for neural radiance fields, in numpy with numba kernels."""

from .encoding import FeatureTableBank, count_parameters, encode, encode_backward, init_tables, spatial_hash
from .errors import (
    ConfigError,
    CorruptFileError,
    DataError,
    DomainError,
    IncompatibleConfigError,
    MFNeRFError,
    ShapeError,
    TrainingDiverged,
)
from .grid import EncodingConfig
from .metrics import psnr, ssim
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CorruptFileError",
    "DataError",
    "DomainError",
    "EncodingConfig",
    "FeatureTableBank",
    "IncompatibleConfigError",
    "MFNeRFError",
    "ShapeError",
    "TrainConfig",
    "TrainingDiverged",
    "count_parameters",
    "encode",
    "encode_backward",
    "init_tables",
    "psnr",
    "spatial_hash",
    "ssim",
    "train",
]
