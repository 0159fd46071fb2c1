"""A small dense-network engine with hand-written backprop.

Hosts both the feature extractor and the critic. Everything runs in float64.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, FormatError, ShapeError

ACTIVATIONS = ("relu", "none")
L2_EPS = 1e-12


@dataclass(frozen=True)
class DenseNetSpec:
    """Layer sizes from input to output, one activation per hidden layer."""

    layer_sizes: tuple
    activations: tuple = None
    final_l2_normalize: bool = False
    output_activation: str = "none"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"need >= 2 positive layer sizes, got {self.layer_sizes}")
        acts = self.activations
        if acts is None:
            acts = ("relu",) * (len(sizes) - 2)
        acts = tuple(acts)
        if len(acts) != len(sizes) - 2:
            raise ValueError("one activation per hidden layer required")
        for a in acts + (self.output_activation,):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def output_dim(self):
        return self.layer_sizes[-1]

    def layer_activation(self, i):
        return self.activations[i] if i < self.n_layers - 1 else self.output_activation


@dataclass
class ModelParams:
    weights: list  # (out, in) per layer
    biases: list
    rng_seed: int = 0
    opt_state: dict = field(default_factory=dict)

    def arrays(self):
        """Parameter arrays in layer order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return ModelParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.rng_seed,
            {k: [a.copy() for a in v] for k, v in self.opt_state.items()},
        )

    def max_abs(self):
        return max(float(np.max(np.abs(a))) for a in self.arrays())


@dataclass
class Grads:
    weights: list
    biases: list

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __add__(self, other):
        return Grads(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scaled(self, s):
        return Grads([s * w for w in self.weights], [s * b for b in self.biases])


@dataclass
class ForwardTrace:
    inputs: list  # input to each affine layer
    pre: list  # affine outputs
    unnormalized: np.ndarray = None  # last activation before the l2 head
    norms: np.ndarray = None


def init_params(spec: DenseNetSpec, rng_seed) -> ModelParams:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(rng_seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    seed = rng_seed if isinstance(rng_seed, (int, np.integer)) else 0
    return ModelParams(weights, biases, int(seed))


def _check_shapes(params, spec):
    if len(params.weights) != spec.n_layers:
        raise ShapeError("parameter count does not match spec")
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        want = (spec.layer_sizes[i + 1], spec.layer_sizes[i])
        if w.shape != want or b.shape != (want[0],):
            raise ShapeError(f"layer {i}: weights {w.shape} / bias {b.shape}, expected {want}")


def forward(params: ModelParams, spec: DenseNetSpec, batch):
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x.shape[1] != spec.input_dim:
        raise ShapeError(f"batch has {x.shape[1]} columns, network expects {spec.input_dim}")
    _check_shapes(params, spec)
    trace = ForwardTrace([], [])
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        trace.inputs.append(h)
        a = h @ w.T + b
        trace.pre.append(a)
        h = np.maximum(a, 0.0) if spec.layer_activation(i) == "relu" else a
    if not np.all(np.isfinite(h)):
        raise DivergenceError("non-finite activations in forward pass")
    if spec.final_l2_normalize:
        norms = np.sqrt(np.sum(h * h, axis=1, keepdims=True) + L2_EPS)
        trace.unnormalized, trace.norms = h, norms
        h = h / norms
    return h, trace


def backward(params: ModelParams, spec: DenseNetSpec, trace: ForwardTrace, grad_outputs):
    """Reverse pass; returns ``(Grads, grad wrt inputs)``."""
    g = np.asarray(grad_outputs, dtype=np.float64)
    if g.shape != trace.pre[-1].shape:
        raise ShapeError(f"upstream gradient {g.shape} vs output {trace.pre[-1].shape}")
    if spec.final_l2_normalize:
        # d(z/|z|) = (I - u u^T) / |z|
        u = trace.unnormalized / trace.norms
        g = (g - u * np.sum(g * u, axis=1, keepdims=True)) / trace.norms
    gw = [None] * spec.n_layers
    gb = [None] * spec.n_layers
    for i in reversed(range(spec.n_layers)):
        if spec.layer_activation(i) == "relu":
            g = g * (trace.pre[i] > 0)
        gw[i] = g.T @ trace.inputs[i]
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    return Grads(gw, gb), g


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "sgd"
    learning_rate: float = 0.001
    decay: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        if self.algorithm not in ("sgd", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")


def optimizer_step(params: ModelParams, grads: Grads, config: OptimizerConfig):
    """Apply one descent step in place and return ``params``."""
    garrs = grads.arrays()
    parrs = params.arrays()
    if len(garrs) != len(parrs) or any(g.shape != p.shape for g, p in zip(garrs, parrs)):
        raise ShapeError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in garrs):
        raise DivergenceError("non-finite gradient")
    lr = config.learning_rate
    if config.algorithm == "sgd":
        for p, g in zip(parrs, garrs):
            p -= lr * g
    else:
        acc = params.opt_state.setdefault("rmsprop", [np.zeros_like(p) for p in parrs])
        for p, g, s in zip(parrs, garrs, acc):
            s *= config.decay
            s += (1.0 - config.decay) * g * g
            p -= lr * g / (np.sqrt(s) + config.eps)
    return params


def clip_weights(params: ModelParams, c: float):
    """Clamp every weight and bias into [-c, c] in place."""
    if not c > 0:
        raise ValueError("clip constant must be positive")
    for p in params.arrays():
        np.clip(p, -c, c, out=p)
    return params


def grad_check(spec, params, loss_fn, batch, fd_step=1e-5, floor=1e-6, corrupt=None):
    """Max relative error between backward() and central finite differences.

    ``loss_fn(outputs) -> (loss, grad_outputs)``. Covers every parameter and
    every input entry. Denominators are floored at ``floor`` so that entries
    with near-zero true gradient are judged on absolute error. ``corrupt`` is
    an optional hook mutating the analytic Grads (checker fault injection).
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    out, trace = forward(params, spec, batch)
    _, g_out = loss_fn(out)
    grads, g_in = backward(params, spec, trace, g_out)
    if corrupt is not None:
        corrupt(grads)

    def loss_at():
        return loss_fn(forward(params, spec, batch)[0])[0]

    worst = 0.0
    targets = list(zip(params.arrays(), grads.arrays())) + [(batch, g_in)]
    for arr, analytic in targets:
        flat = arr.reshape(-1)
        an = analytic.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + fd_step
            lp = loss_at()
            flat[k] = orig - fd_step
            lm = loss_at()
            flat[k] = orig
            num = (lp - lm) / (2 * fd_step)
            err = abs(num - an[k]) / max(abs(num), abs(an[k]), floor)
            worst = max(worst, err)
    return worst


# --- ABCM checkpoint format -------------------------------------------------

_ABCM_MAGIC = b"ABCM"
_ABCM_VERSION = 1
_ACT_CODE = {"none": 0, "relu": 1}
_ACT_NAME = {v: k for k, v in _ACT_CODE.items()}
ROLES = ("extractor", "critic.dense", "critic.coord", "head")


def save_checkpoint(path, nets):
    """Write ``[(spec, params, role), ...]`` to one ABCM file (atomic rename).

    Layout: magic, u32 version, u32 net count; per net: u32 size count,
    u32 sizes, u8 flags (bit 0: l2 head, bits 4-7: role), u8 output
    activation, u8 per hidden activation, then float64 LE parameters per
    layer (weights row-major, then bias).
    """
    chunks = [struct.pack("<4sII", _ABCM_MAGIC, _ABCM_VERSION, len(nets))]
    for spec, params, role in nets:
        _check_shapes(params, spec)
        sizes = spec.layer_sizes
        chunks.append(struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes))
        flags = [int(spec.final_l2_normalize) | (ROLES.index(role) << 4),
                 _ACT_CODE[spec.output_activation]]
        flags += [_ACT_CODE[a] for a in spec.activations]
        chunks.append(bytes(flags))
        for w, b in zip(params.weights, params.biases):
            chunks.append(w.astype("<f8").tobytes())
            chunks.append(b.astype("<f8").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``[(spec, params, role)]``."""
    data = Path(path).read_bytes()
    try:
        magic, version, count = struct.unpack_from("<4sII", data, 0)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated ABCM header") from exc
    if magic != _ABCM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _ABCM_VERSION:
        raise FormatError(f"{path}: unsupported ABCM version {version}")
    off = 12
    nets = []
    try:
        for _ in range(count):
            (k,) = struct.unpack_from("<I", data, off)
            if not 2 <= k <= 64:
                raise FormatError(f"{path}: implausible layer count {k}")
            sizes = struct.unpack_from(f"<{k}I", data, off + 4)
            off += 4 + 4 * k
            flags = data[off:off + k]
            if len(flags) != k:
                raise FormatError(f"{path}: truncated layer flags")
            off += k
            spec = DenseNetSpec(
                sizes,
                tuple(_ACT_NAME[f] for f in flags[2:]),
                bool(flags[0] & 1),
                _ACT_NAME[flags[1]],
            )
            role = ROLES[flags[0] >> 4]
            weights, biases = [], []
            for fi, fo in zip(sizes[:-1], sizes[1:]):
                w = np.frombuffer(data, "<f8", fo * fi, off).reshape(fo, fi)
                off += 8 * fo * fi
                b = np.frombuffer(data, "<f8", fo, off)
                off += 8 * fo
                weights.append(w.astype(np.float64))
                biases.append(b.astype(np.float64))
            nets.append((spec, ModelParams(weights, biases), role))
    except (struct.error, ValueError, KeyError, IndexError) as exc:
        raise FormatError(f"{path}: corrupt ABCM body ({exc})") from exc
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return nets
