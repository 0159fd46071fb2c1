"""Adversarially regularized binary codes: training, encoding and Hamming retrieval."""

__version__ = "0.1.0"

from .codespace import (BinaryCodes, CodePrior, binarize, hamming, load_codes, normalization_factor,
                        normalize_l2, normalize_uniform, sample_codes, save_codes)
from .dataset import IdentityDataset, SplitProtocol, SynthConfig, generate_synthetic
from .errors import AbcError
from .retrieval import benchmark, build_index, evaluate, query_euclidean, query_hamming
from .trainer import TrainConfig, encode_dataset, pretrain, train_joint

__all__ = [
    "AbcError", "BinaryCodes", "CodePrior", "IdentityDataset", "SplitProtocol", "SynthConfig",
    "TrainConfig", "benchmark", "binarize", "build_index", "encode_dataset", "evaluate",
    "generate_synthetic", "hamming", "load_codes", "normalization_factor", "normalize_l2",
    "normalize_uniform", "pretrain", "query_euclidean", "query_hamming", "sample_codes",
    "save_codes", "train_joint",
]
