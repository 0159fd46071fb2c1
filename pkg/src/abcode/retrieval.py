"""Exact linear-scan retrieval, CMC/mAP evaluation and scan benchmarking."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .codespace import BinaryCodes, n_words
from .errors import ShapeError


@dataclass(frozen=True)
class HammingIndex:
    codes: BinaryCodes
    identities: np.ndarray
    views: np.ndarray

    @property
    def m(self):
        return self.codes.m

    def __len__(self):
        return len(self.codes)


@dataclass(frozen=True)
class EuclideanIndex:
    features: np.ndarray
    identities: np.ndarray = None
    views: np.ndarray = None

    def __len__(self):
        return self.features.shape[0]


def _labels(labels, n):
    if labels is None:
        return np.zeros(n, np.int64), np.zeros(n, np.int64)
    ids, views = (np.asarray(a, dtype=np.int64).reshape(-1) for a in labels)
    if ids.size != n or views.size != n:
        raise ShapeError(f"{n} rows but {ids.size} identities / {views.size} views")
    return ids, views


def build_index(codes: BinaryCodes, labels=None) -> HammingIndex:
    """``labels`` is an ``(identities, views)`` pair aligned with ``codes``."""
    if len(codes) == 0:
        raise ValueError("cannot index an empty code set")
    ids, views = _labels(labels, len(codes))
    return HammingIndex(codes, ids, views)


def build_euclidean_index(features, labels=None) -> EuclideanIndex:
    f = np.atleast_2d(np.asarray(features))
    if f.shape[0] == 0:
        raise ValueError("cannot index an empty gallery")
    ids, views = _labels(labels, f.shape[0])
    return EuclideanIndex(f, ids, views)


def cross_view_exclude(identity, view):
    """Predicate dropping gallery rows that share both identity and view with the query."""
    def exclude(ids, views):
        return (ids == identity) & (views == view)
    return exclude


def _exclusion_mask(exclude, ids, views):
    if exclude is None:
        return np.zeros(ids.size, dtype=bool)
    if callable(exclude):
        return np.asarray(exclude(ids, views), dtype=bool)
    mask = np.asarray(exclude, dtype=bool)
    if mask.shape != ids.shape:
        raise ShapeError("exclusion mask must have one entry per gallery row")
    return mask


def _rank(dist, mask, k):
    keep = np.flatnonzero(~mask)
    order = keep[np.argsort(dist[keep], kind="stable")]
    if k is not None:
        order = order[:k]
    return [(int(r), dist[r].item()) for r in order]


SCAN_BLOCK = 4096


def hamming_scan(words, q_words):
    """Distances from one packed query to every packed gallery row.

    Works through the table in cache-sized blocks with one scratch buffer,
    which avoids materializing full-size XOR and popcount temporaries.
    """
    n = words.shape[0]
    out = np.empty(n, np.uint64)
    scratch = np.empty((min(n, SCAN_BLOCK), words.shape[1]), np.uint64)
    for s in range(0, n, SCAN_BLOCK):
        e = min(s + SCAN_BLOCK, n)
        buf = scratch[:e - s]
        np.bitwise_xor(words[s:e], q_words, out=buf)
        np.bitwise_count(buf, out=buf)
        np.einsum("ij->i", buf, out=out[s:e])
    return out.view(np.int64)


def query_hamming(index: HammingIndex, q: BinaryCodes, exclude=None, k=None):
    """Ranked ``[(row, distance)]``, ascending distance, ties by row id."""
    if q.m != index.m:
        raise ShapeError(f"query has {q.m} bits, index has {index.m}")
    dist = hamming_scan(index.codes.words, q.words[0])
    return _rank(dist, _exclusion_mask(exclude, index.identities, index.views), k)


def query_euclidean(gallery, q, exclude=None, k=None):
    """Same contract as :func:`query_hamming` over real vectors.

    ``gallery`` is an :class:`EuclideanIndex` or a bare ``(n, d)`` array.
    """
    if not isinstance(gallery, EuclideanIndex):
        gallery = build_euclidean_index(gallery)
    g = np.asarray(gallery.features, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.size != g.shape[1]:
        raise ShapeError(f"query dim {q.size} vs gallery dim {g.shape[1]}")
    # sorted summation: the result depends only on the multiset of terms,
    # so rows at equal distance tie exactly and fall back to row order
    dist = np.sqrt(np.sort((g - q) ** 2, axis=1).sum(axis=1))
    return _rank(dist, _exclusion_mask(exclude, gallery.identities, gallery.views), k)


@dataclass
class EvalReport:
    cmc: np.ndarray
    map: float
    per_query_ap: np.ndarray

    def rank(self, k):
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_csv(self, path, extra=None):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "cmc"])
            for k, v in enumerate(self.cmc, 1):
                w.writerow([k, repr(float(v))])
            w.writerow([])
            w.writerow(["metric", "value"])
            w.writerow(["map", repr(self.map)])
            w.writerow(["n_queries", len(self.per_query_ap)])
            for key, val in (extra or {}).items():
                w.writerow([key, val])


def evaluate(hits, k_max=None) -> EvalReport:
    """CMC and mAP from per-query relevance flags.

    ``hits[i]`` is the boolean relevance of query ``i``'s ranked list (rank 1
    first, exclusions already removed). Every query needs >= 1 relevant item.
    """
    if len(hits) == 0:
        raise ValueError("no queries to evaluate")
    hits = [np.asarray(h, dtype=bool) for h in hits]
    if k_max is None:
        k_max = max(h.size for h in hits)
    first = np.empty(len(hits), dtype=np.int64)
    aps = np.empty(len(hits))
    for i, h in enumerate(hits):
        pos = np.flatnonzero(h)
        if pos.size == 0:
            raise ValueError(f"query {i} has no relevant gallery item")
        first[i] = pos[0]
        precision = np.arange(1, pos.size + 1) / (pos + 1)
        aps[i] = precision.mean()
    cmc = np.array([(first < k).mean() for k in range(1, k_max + 1)])
    return EvalReport(cmc, float(aps.mean()), aps)


def evaluate_index(index, q_items, q_ids, q_views, k_max=None):
    """Rank every query against ``index`` under the cross-view rule, then evaluate.

    ``index`` is a HammingIndex (queries: BinaryCodes) or EuclideanIndex
    (queries: real rows).
    """
    hits = []
    for i in range(len(q_ids)):
        exclude = cross_view_exclude(q_ids[i], q_views[i])
        if isinstance(index, HammingIndex):
            ranked = query_hamming(index, q_items[i], exclude)
        else:
            ranked = query_euclidean(index, q_items[i], exclude)
        rows = np.array([r for r, _ in ranked], dtype=np.int64)
        hits.append(index.identities[rows] == q_ids[i])
    return evaluate(hits, k_max)


@dataclass
class BenchReport:
    kind: str
    bits: int
    gallery_size: int
    n_queries: int
    repetitions: int
    memory_bytes: int
    median_query_seconds: float
    mean_query_seconds: float
    total_scan_seconds: float
    rep_seconds: list = field(default_factory=list)

    def rows(self):
        return [
            ("kind", self.kind),
            ("bits", self.bits),
            ("gallery_size", self.gallery_size),
            ("n_queries", self.n_queries),
            ("repetitions", self.repetitions),
            ("memory_bytes", self.memory_bytes),
            ("median_query_seconds", repr(self.median_query_seconds)),
            ("mean_query_seconds", repr(self.mean_query_seconds)),
            ("total_scan_seconds", repr(self.total_scan_seconds)),
        ]


def write_bench_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "metric", "value"])
        for rep in reports:
            for key, val in rep.rows():
                w.writerow([rep.kind, key, val])


def binary_memory_bytes(n, m):
    return n * n_words(m) * 8


def float_memory_bytes(n, m):
    return n * m * 4


def benchmark(gallery, queries, repetitions=3) -> BenchReport:
    """Time full gallery scans (distance to every row) for each query.

    ``gallery`` is a HammingIndex with BinaryCodes queries, or a float32
    ``(n, m)`` array / EuclideanIndex with real queries. Index construction
    and norm precomputation are not timed. Memory is analytic.
    """
    if repetitions < 3:
        raise ValueError("need at least 3 repetitions")
    if isinstance(gallery, HammingIndex):
        kind, words = "binary", gallery.codes.words
        qs = [queries.words[i] for i in range(len(queries))]
        n, m = len(gallery), gallery.m
        memory = binary_memory_bytes(n, m)

        def scan(q):
            return hamming_scan(words, q)
    else:
        feats = gallery.features if isinstance(gallery, EuclideanIndex) else gallery
        feats = np.ascontiguousarray(feats, dtype=np.float32)
        kind = "float"
        n, m = feats.shape
        memory = float_memory_bytes(n, m)
        sq = np.einsum("ij,ij->i", feats, feats)
        qs = [np.asarray(q, dtype=np.float32) for q in np.atleast_2d(queries)]

        def scan(q):
            return sq - 2.0 * (feats @ q) + q @ q
    rep_totals = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for q in qs:
            scan(q)
        rep_totals.append(time.perf_counter() - t0)
    per_query = np.array(rep_totals) / len(qs)
    return BenchReport(kind, m, n, len(qs), repetitions, memory,
                       float(np.median(per_query)), float(per_query.mean()),
                       float(np.median(rep_totals)), rep_totals)
