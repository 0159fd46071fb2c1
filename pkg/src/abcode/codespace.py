"""Code-space math: Bernoulli code prior, normalization, binarization, Hamming.

Codes are stored bit-packed in little-endian uint64 words: bit ``j`` of a code
lives in word ``j // 64`` at position ``j % 64``. Unused trailing bits are zero.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegeneratePriorError, FormatError, ShapeError, ZeroVectorError, EmptyDatasetError

NORM_MATCHING = "norm-matching"
PAPER_LITERAL = "paper-literal"
LAMBDA_MODES = (NORM_MATCHING, PAPER_LITERAL)

ZERO_NORM_TOL = 1e-12


def n_words(m):
    return (m + 63) // 64


def pack(bits):
    """Pack a ``(..., m)`` array of 0/1 values into ``(..., ceil(m/64))`` uint64 words."""
    bits = np.asarray(bits)
    if bits.ndim == 0 or bits.shape[-1] == 0:
        raise ShapeError("need at least one bit")
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bits must be 0 or 1")
    m = bits.shape[-1]
    nbytes = n_words(m) * 8
    packed = np.packbits(bits.astype(np.uint8), axis=-1, bitorder="little")
    pad = nbytes - packed.shape[-1]
    if pad:
        widths = [(0, 0)] * (packed.ndim - 1) + [(0, pad)]
        packed = np.pad(packed, widths)
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)


def unpack(words, m):
    """Inverse of :func:`pack`; returns uint8 bits of shape ``(..., m)``."""
    words = np.ascontiguousarray(words, dtype="<u8")
    if words.shape[-1] != n_words(m):
        raise ShapeError(f"{words.shape[-1]} words cannot hold a {m}-bit code")
    as_bytes = words.view(np.uint8)
    return np.unpackbits(as_bytes, axis=-1, count=m, bitorder="little")


@dataclass(frozen=True)
class BinaryCodes:
    """A batch of ``n`` packed m-bit codes (``words`` has shape ``(n, ceil(m/64))``)."""

    words: np.ndarray
    m: int

    def __post_init__(self):
        w = np.ascontiguousarray(self.words, dtype=np.uint64)
        if w.ndim == 1:
            w = w[None, :]
        if self.m < 1 or w.ndim != 2 or w.shape[1] != n_words(self.m):
            raise ShapeError(f"words of shape {w.shape} do not match m={self.m}")
        rem = self.m % 64
        if rem and np.any(w[:, -1] >> np.uint64(rem)):
            raise ValueError("unused trailing bits must be zero")
        w.setflags(write=False)
        object.__setattr__(self, "words", w)

    @classmethod
    def from_bits(cls, bits):
        bits = np.atleast_2d(np.asarray(bits))
        return cls(pack(bits), bits.shape[-1])

    def bits(self):
        return unpack(self.words, self.m)

    def __len__(self):
        return self.words.shape[0]

    def __getitem__(self, idx):
        rows = self.words[idx]
        return BinaryCodes(np.atleast_2d(rows), self.m)

    def __eq__(self, other):
        if not isinstance(other, BinaryCodes):
            return NotImplemented
        return self.m == other.m and np.array_equal(self.words, other.words)

    __hash__ = None

    @property
    def nbytes(self):
        return self.words.size * 8


@dataclass(frozen=True)
class CodePrior:
    m: int
    p: float = 0.5
    lambda_mode: str = NORM_MATCHING

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"code length must be a positive integer, got {self.m}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"Bernoulli p must lie in [0, 1], got {self.p}")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ValueError(f"unknown lambda mode {self.lambda_mode!r}")


def sample_codes(prior: CodePrior, count: int, rng_seed) -> BinaryCodes:
    """Draw ``count`` codes with i.i.d. Bernoulli(p) bits.

    ``rng_seed`` may be an int or an existing ``np.random.Generator``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    bits = rng.random((count, prior.m)) < prior.p
    return BinaryCodes.from_bits(bits.astype(np.uint8))


def normalization_factor(prior: CodePrior) -> float:
    """Global scale dividing binary targets.

    norm-matching gives sqrt(m p), so that E||B / lambda||^2 == 1; paper-literal
    squares the Bernoulli mean, sqrt(m p^2).
    """
    if prior.p == 0:
        raise DegeneratePriorError("p = 0 gives a zero normalization factor")
    if prior.lambda_mode == NORM_MATCHING:
        return float(np.sqrt(prior.m * prior.p))
    return float(np.sqrt(prior.m * prior.p**2))


def _check_lambda(lam):
    if not lam > 0 or not np.isfinite(lam):
        raise ValueError(f"lambda must be positive and finite, got {lam}")


def normalize_uniform(code, lam):
    """Embed bits as reals ``b_j / lambda``. Accepts BinaryCodes or raw 0/1 arrays."""
    _check_lambda(lam)
    bits = code.bits() if isinstance(code, BinaryCodes) else np.asarray(code)
    return bits.astype(np.float64) / lam


def normalize_l2(v):
    """Scale rows of ``v`` to unit Euclidean norm; zero rows raise."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= ZERO_NORM_TOL):
        raise ZeroVectorError("cannot l2-normalize a (near-)zero vector")
    return v / norms


def binarize(z, lam) -> BinaryCodes:
    """Threshold features at 1/(2 lambda); a value exactly on the threshold maps to 0."""
    _check_lambda(lam)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return BinaryCodes.from_bits((z > 1.0 / (2.0 * lam)).astype(np.uint8))


def hamming(a: BinaryCodes, b: BinaryCodes):
    """XOR + popcount distance.

    Rows are paired (one-row operands broadcast). Returns an int when both
    operands hold a single code, otherwise an int64 array.
    """
    if a.m != b.m:
        raise ShapeError(f"code lengths differ: {a.m} vs {b.m}")
    if len(a) != len(b) and 1 not in (len(a), len(b)):
        raise ShapeError(f"cannot pair {len(a)} codes with {len(b)}")
    d = np.bitwise_count(a.words ^ b.words).sum(axis=1, dtype=np.int64)
    return int(d[0]) if d.shape[0] == 1 else d


# --- ABCB file format -------------------------------------------------------

_ABCB_MAGIC = b"ABCB"
_ABCB_VERSION = 1
_ABCB_HEADER = struct.Struct("<4sIQI")


def save_codes(path, codes: BinaryCodes):
    header = _ABCB_HEADER.pack(_ABCB_MAGIC, _ABCB_VERSION, len(codes), codes.m)
    Path(path).write_bytes(header + codes.words.astype("<u8").tobytes())


def load_codes(path) -> BinaryCodes:
    data = Path(path).read_bytes()
    if len(data) < _ABCB_HEADER.size:
        raise FormatError(f"{path}: truncated ABCB header")
    magic, version, n, m = _ABCB_HEADER.unpack_from(data)
    if magic != _ABCB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _ABCB_VERSION:
        raise FormatError(f"{path}: unsupported ABCB version {version}")
    if n == 0:
        raise EmptyDatasetError(f"{path}: file holds no codes")
    if m == 0:
        raise FormatError(f"{path}: zero code length")
    expected = _ABCB_HEADER.size + n * n_words(m) * 8
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    words = np.frombuffer(data, dtype="<u8", offset=_ABCB_HEADER.size).reshape(n, n_words(m))
    try:
        return BinaryCodes(words.astype(np.uint64), m)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
