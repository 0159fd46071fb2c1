"""Multi-view identity data: synthesis, ABCF I/O, query/gallery split, batch sampling."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import EmptyDatasetError, FormatError, ProtocolError
from .losses import TripletBatch


@dataclass(frozen=True)
class IdentityDataset:
    features: np.ndarray  # (n, d) float32
    identities: np.ndarray  # (n,) int64
    views: np.ndarray  # (n,) int64

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float32)
        ids = np.asarray(self.identities, dtype=np.int64).reshape(-1)
        vs = np.asarray(self.views, dtype=np.int64).reshape(-1)
        if f.ndim != 2 or not (f.shape[0] == ids.size == vs.size):
            raise ValueError("features, identities and views must align")
        if not np.all(np.isfinite(f)):
            raise ValueError("features must be finite")
        if np.any(ids < 0) or np.any(vs < 0):
            raise ValueError("labels must be non-negative")
        for name, v in (("features", f), ("identities", ids), ("views", vs)):
            object.__setattr__(self, name, v)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return IdentityDataset(self.features[idx], self.identities[idx], self.views[idx])

    @cached_property
    def class_ids(self):
        """Sorted distinct identities; position = dense class index."""
        return np.unique(self.identities)

    def class_labels(self):
        return np.searchsorted(self.class_ids, self.identities)

    @cached_property
    def _groups(self):
        """identity -> {view -> record indices}."""
        groups = {}
        for i, (pid, v) in enumerate(zip(self.identities.tolist(), self.views.tolist())):
            groups.setdefault(pid, {}).setdefault(v, []).append(i)
        return {pid: {v: np.array(ix) for v, ix in sorted(g.items())} for pid, g in sorted(groups.items())}

    @cached_property
    def multiview_ids(self):
        return np.array([pid for pid, g in self._groups.items() if len(g) >= 2], dtype=np.int64)


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 32
    views_per_identity: int = 4
    samples_per_view: int = 8
    input_dim: int = 32
    intra_identity_noise_sigma: float = 0.1
    view_offset_sigma: float = 0.1
    mean_scale: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_identities < 2 or self.views_per_identity < 2 or self.samples_per_view < 1:
            raise ValueError("need K >= 2 identities, V >= 2 views, S >= 1 samples")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.intra_identity_noise_sigma < 0 or self.view_offset_sigma < 0 or self.mean_scale <= 0:
            raise ValueError("sigmas must be non-negative and mean_scale positive")


def generate_synthetic(config: SynthConfig) -> IdentityDataset:
    """Gaussian identity clusters with an additive offset per (identity, view).

    Records are ordered identity-major, then view, then sample.
    """
    K, V, S, d = (config.num_identities, config.views_per_identity,
                  config.samples_per_view, config.input_dim)
    rng = np.random.default_rng(config.rng_seed)
    means = rng.standard_normal((K, d))
    means *= config.mean_scale / np.linalg.norm(means, axis=1, keepdims=True)
    offsets = rng.standard_normal((K, V, d)) * config.view_offset_sigma
    noise = rng.standard_normal((K, V, S, d)) * config.intra_identity_noise_sigma
    x = means[:, None, None, :] + offsets[:, :, None, :] + noise
    ids = np.repeat(np.arange(K), V * S)
    views = np.tile(np.repeat(np.arange(V), S), K)
    return IdentityDataset(x.reshape(K * V * S, d).astype(np.float32), ids, views)


# --- ABCF file format -------------------------------------------------------

_ABCF_MAGIC = b"ABCF"
_ABCF_VERSION = 1
_ABCF_HEADER = struct.Struct("<4sIQI")


def _record_dtype(d):
    return np.dtype([("identity", "<u4"), ("view", "<u2"), ("x", "<f4", (d,))])


def save_features(path, ds: IdentityDataset):
    if ds.identities.max(initial=0) > 0xFFFFFFFF or ds.views.max(initial=0) > 0xFFFF:
        raise ValueError("labels exceed ABCF field widths")
    rec = np.empty(len(ds), dtype=_record_dtype(ds.dim))
    rec["identity"] = ds.identities
    rec["view"] = ds.views
    rec["x"] = ds.features
    header = _ABCF_HEADER.pack(_ABCF_MAGIC, _ABCF_VERSION, len(ds), ds.dim)
    Path(path).write_bytes(header + rec.tobytes())


def load_features(path) -> IdentityDataset:
    data = Path(path).read_bytes()
    if len(data) < _ABCF_HEADER.size:
        raise FormatError(f"{path}: truncated ABCF header")
    magic, version, n, d = _ABCF_HEADER.unpack_from(data)
    if magic != _ABCF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _ABCF_VERSION:
        raise FormatError(f"{path}: unsupported ABCF version {version}")
    if n == 0:
        raise EmptyDatasetError(f"{path}: dataset has no records")
    if d == 0:
        raise FormatError(f"{path}: zero feature dimension")
    dt = _record_dtype(d)
    if len(data) != _ABCF_HEADER.size + n * dt.itemsize:
        raise FormatError(f"{path}: size does not match header (n={n}, d={d})")
    rec = np.frombuffer(data, dtype=dt, offset=_ABCF_HEADER.size)
    if not np.all(np.isfinite(rec["x"])):
        raise FormatError(f"{path}: non-finite feature values")
    return IdentityDataset(rec["x"].copy(), rec["identity"].astype(np.int64), rec["view"].astype(np.int64))


# --- splitting and sampling -------------------------------------------------

@dataclass(frozen=True)
class SplitProtocol:
    """Per-identity query fraction; same-identity same-view gallery rows are
    excluded at ranking time (see ``retrieval.cross_view_exclude``)."""

    query_fraction: float = 0.25

    def __post_init__(self):
        if not 0 < self.query_fraction < 1:
            raise ValueError("query_fraction must lie in (0, 1)")


def split_query_gallery(ds: IdentityDataset, protocol: SplitProtocol, rng_seed):
    """Return sorted ``(query_idx, gallery_idx)``; every query keeps a cross-view match."""
    rng = np.random.default_rng(rng_seed)
    queries = []
    for pid, by_view in ds._groups.items():
        if len(by_view) < 2:
            raise ProtocolError(f"identity {pid} has a single view; cross-view queries impossible")
        idx = np.concatenate(list(by_view.values()))
        want = max(1, int(round(protocol.query_fraction * idx.size)))
        gallery_views = {v: len(ix) for v, ix in by_view.items()}
        chosen_views = set()
        for i in rng.permutation(idx):
            v = int(ds.views[i])
            trial = dict(gallery_views)
            trial[v] -= 1
            # every chosen query view (and v) needs gallery rows in some other view
            need = chosen_views | {v}
            if all(any(c > 0 for w, c in trial.items() if w != qv) for qv in need):
                queries.append(int(i))
                gallery_views = trial
                chosen_views.add(v)
                want -= 1
                if want == 0:
                    break
    q = np.sort(np.array(queries, dtype=np.int64))
    g = np.setdiff1d(np.arange(len(ds)), q)
    return q, g


def sample_triplet_batch(ds: IdentityDataset, n: int, rng) -> TripletBatch:
    """``n`` distinct anchor identities; anchor/positive from two different views,
    negative drawn uniformly from the records of all other identities."""
    pool = ds.multiview_ids
    if n < 1 or n > pool.size:
        raise ProtocolError(f"need {n} identities with >= 2 views, dataset has {pool.size}")
    if np.unique(ds.identities).size < 2:
        raise ProtocolError("negatives need at least two identities")
    persons = rng.choice(pool, size=n, replace=False)
    n_total = len(ds)
    idx = np.empty((n, 3), dtype=np.int64)
    for r, pid in enumerate(persons.tolist()):
        by_view = ds._groups[pid]
        views = list(by_view)
        va, vp = rng.choice(len(views), size=2, replace=False)
        idx[r, 0] = rng.choice(by_view[views[va]])
        idx[r, 1] = rng.choice(by_view[views[vp]])
        while True:
            j = int(rng.integers(n_total))
            if ds.identities[j] != pid:
                break
        idx[r, 2] = j
    x = ds.features.astype(np.float64)
    return TripletBatch(x[idx[:, 0]], x[idx[:, 1]], x[idx[:, 2]],
                        ds.identities[idx], ds.views[idx], idx)


def sample_class_batch(ds: IdentityDataset, batch_size: int, rng):
    """Uniform draw (with replacement) of records and their dense class labels."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = rng.integers(len(ds), size=batch_size)
    return ds.features[idx].astype(np.float64), ds.class_labels()[idx]
