"""End-to-end synthetic runs: synthesize, split, pretrain, train, encode, evaluate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .codespace import binarize, normalization_factor
from .dataset import IdentityDataset, SplitProtocol, SynthConfig, generate_synthetic, split_query_gallery
from .retrieval import EvalReport, build_euclidean_index, build_index, evaluate_index
from .trainer import TrainConfig, TrainReport, extract, pretrain, train_joint


def quantization_fraction(z, lam, tol=0.25):
    """Share of entries within ``tol / lam`` of either 0 or 1/lam."""
    z = np.asarray(z)
    near = np.minimum(np.abs(z), np.abs(z - 1.0 / lam))
    return float(np.mean(near <= tol / lam))


@dataclass
class RetrievalSummary:
    real: EvalReport
    binary: EvalReport
    quantized_fraction: float
    bit_mean: float
    bit_means: np.ndarray

    @property
    def rank1_drop(self):
        return self.real.rank(1) - self.binary.rank(1)

    def as_dict(self):
        return {
            "rank1_real": self.real.rank(1),
            "rank1_binary": self.binary.rank(1),
            "map_real": self.real.map,
            "map_binary": self.binary.map,
            "rank1_drop": self.rank1_drop,
            "quantized_fraction": self.quantized_fraction,
            "bit_mean": self.bit_mean,
        }


def evaluate_extractor(extractor, spec, ds: IdentityDataset, q_idx, g_idx, lam) -> RetrievalSummary:
    """Cross-view retrieval with real-valued features and with their binary codes."""
    z = extract(extractor, spec, ds)
    codes = binarize(z, lam)
    ids, views = ds.identities, ds.views
    real_index = build_euclidean_index(z[g_idx], (ids[g_idx], views[g_idx]))
    real = evaluate_index(real_index, z[q_idx], ids[q_idx], views[q_idx])
    bin_index = build_index(codes[g_idx], (ids[g_idx], views[g_idx]))
    queries = [codes[int(i)] for i in q_idx]
    binary = evaluate_index(bin_index, queries, ids[q_idx], views[q_idx])
    bit_means = codes[g_idx].bits().mean(axis=0)
    return RetrievalSummary(real, binary, quantization_fraction(z, lam), float(bit_means.mean()), bit_means)


@dataclass
class RunResult:
    summary: RetrievalSummary
    pretrain_report: TrainReport
    joint_report: TrainReport
    extractor: nn.ModelParams
    critic: nn.ModelParams
    lam: float


def run_synthetic(synth: SynthConfig, config: TrainConfig) -> RunResult:
    """Train on the gallery split, evaluate queries against it.

    Seeding matches the CLI stages: init and pretraining draw from
    ``rng_seed``, joint training from ``rng_seed + 1``.
    """
    ds = generate_synthetic(synth)
    q_idx, g_idx = split_query_gallery(ds, SplitProtocol(config.query_fraction), config.split_seed)
    train_ds = ds.subset(g_idx)
    rng = np.random.default_rng(config.rng_seed)
    ext = nn.init_params(config.extractor_spec(ds.dim), rng)
    ext, pre_report = pretrain(ext, train_ds, config, rng)
    ext, critic, joint_report = train_joint(ext, None, train_ds, config)
    lam = normalization_factor(config.prior)
    summary = evaluate_extractor(ext, config.extractor_spec(ds.dim), ds, q_idx, g_idx, lam)
    return RunResult(summary, pre_report, joint_report, ext, critic, lam)
