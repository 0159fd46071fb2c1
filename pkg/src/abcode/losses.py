"""Objectives with analytic gradients.

Every function returns ``(value, grads)`` where grads mirror the inputs.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DIST_EPS = 1e-12


def euclidean(a, b):
    """Row-wise sqrt(||a - b||^2 + eps); scalar for 1-D inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch {a.shape} vs {b.shape}")
    d = np.sqrt(np.sum((a - b) ** 2, axis=-1) + DIST_EPS)
    return float(d) if d.ndim == 0 else d


@dataclass
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    # optional metadata: (n, 3) arrays ordered anchor, positive, negative
    identities: np.ndarray = None
    views: np.ndarray = None
    indices: np.ndarray = None

    def __post_init__(self):
        shapes = {np.shape(self.anchors), np.shape(self.positives), np.shape(self.negatives)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ShapeError(f"triplet roles must be equal-shape 2-D arrays, got {shapes}")

    def __len__(self):
        return len(self.anchors)

    def violations(self):
        """Number of rows breaking the identity/view invariants."""
        if self.identities is None:
            return 0
        ids, views = self.identities, self.views
        bad = (ids[:, 0] != ids[:, 1]) | (ids[:, 2] == ids[:, 0])
        if views is not None:
            bad |= views[:, 0] == views[:, 1]
        return int(bad.sum())


def triplet_loss(batch: TripletBatch, alpha: float):
    """Mean hinge on d(a, p) - d(a, n) + alpha with plain Euclidean distances.

    The hinge is treated as inactive exactly at zero.
    """
    a, p, n = (np.asarray(x, dtype=np.float64) for x in (batch.anchors, batch.positives, batch.negatives))
    count = a.shape[0]
    dap = euclidean(a, p)
    dan = euclidean(a, n)
    margins = dap - dan + alpha
    active = margins > 0
    loss = float(np.sum(np.where(active, margins, 0.0)) / count)
    w = active[:, None] / count
    u_ap = (a - p) / dap[:, None]
    u_an = (a - n) / dan[:, None]
    ga = w * (u_ap - u_an)
    gp = -w * u_ap
    gn = w * u_an
    return loss, (ga, gp, gn)


def _scores(x, name):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError(f"{name} scores are empty")
    return x


def critic_objective(real_scores, fake_scores):
    """Wasserstein estimate mean(real) - mean(fake), to be maximized by the critic."""
    r = _scores(real_scores, "real")
    f = _scores(fake_scores, "fake")
    value = float(r.mean() - f.mean())
    return value, (np.full(r.size, 1.0 / r.size), np.full(f.size, -1.0 / f.size))


def generator_objective(fake_scores):
    f = _scores(fake_scores, "fake")
    return float(-f.mean()), np.full(f.size, -1.0 / f.size)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy; gradient is (softmax - onehot) / n."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.asarray(labels).reshape(-1)
    n, k = z.shape
    if y.shape[0] != n:
        raise ShapeError("one label per row required")
    if np.any((y < 0) | (y >= k)):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    rows = np.arange(n)
    loss = float(-logp[rows, y].mean())
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return loss, grad / n


@dataclass(frozen=True)
class MarginSchedule:
    """Step ladder of ``(start_iteration, margin)`` pairs."""

    ladder: tuple

    def __post_init__(self):
        ladder = tuple((int(s), float(m)) for s, m in self.ladder)
        if not ladder or ladder[0][0] != 0:
            raise ValueError("margin ladder must start at iteration 0")
        starts = [s for s, _ in ladder]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("ladder iterations must be strictly increasing")
        if any(m <= 0 for _, m in ladder):
            raise ValueError("margins must be positive")
        object.__setattr__(self, "ladder", ladder)

    def scaled(self, total_iters, reference_iters):
        """Stretch the ladder proportionally from ``reference_iters`` to ``total_iters``."""
        out = [(0, self.ladder[0][1])]
        for s, m in self.ladder[1:]:
            start = int(round(s * total_iters / reference_iters))
            if start > out[-1][0]:
                out.append((start, m))
            else:
                out[-1] = (out[-1][0], m)
        return MarginSchedule(tuple(out))

    def __str__(self):
        return ";".join(f"{s}:{m:g}" for s, m in self.ladder)

    @classmethod
    def parse(cls, text):
        """Inverse of ``str()``: ``"0:0.2;1000:0.3"``."""
        pairs = []
        for item in text.split(";"):
            s, m = item.split(":")
            pairs.append((int(s), float(m)))
        return cls(tuple(pairs))


# Ladders used on the three benchmarks, with their total iteration counts.
CUHK03_LADDER = MarginSchedule(((0, 0.2), (1000, 0.3), (2500, 0.4), (4000, 0.5)))
CUHK03_ITERS = 6000
MARKET1501_LADDER = MarginSchedule(((0, 0.2), (1000, 0.3), (4000, 0.4)))
MARKET1501_ITERS = 8000
DUKE_LADDER = MarginSchedule(((0, 0.2), (2000, 0.3), (5000, 0.4)))
DUKE_ITERS = 8000


def margin_at(schedule: MarginSchedule, iteration: int) -> float:
    starts = [s for s, _ in schedule.ladder]
    idx = bisect.bisect_right(starts, iteration) - 1
    return schedule.ladder[max(idx, 0)][1]
