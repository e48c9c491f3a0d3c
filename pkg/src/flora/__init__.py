"""Asymmetric binary hashing that approximates a frozen user-item measure."""

from .errors import ConfigError, FloraError, FormatError, InputError, NumericError
from .hashmodel import FloraModel, HashConfig, build_model, encode_binary, encode_continuous
from .index import MultiTableIndex, PackedCodes, build_index, pack_codes, rank_full_scan
from .measures import Measure, make_measure, measure_score, measure_score_batch
from .sampler import SamplingStrategy, build_positive_cache, sample_minibatch
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FloraError",
    "FloraModel",
    "FormatError",
    "HashConfig",
    "InputError",
    "Measure",
    "MultiTableIndex",
    "NumericError",
    "PackedCodes",
    "SamplingStrategy",
    "TrainConfig",
    "build_index",
    "build_model",
    "build_positive_cache",
    "encode_binary",
    "encode_continuous",
    "make_measure",
    "measure_score",
    "measure_score_batch",
    "pack_codes",
    "rank_full_scan",
    "sample_minibatch",
    "train",
]
