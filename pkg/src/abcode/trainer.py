"""Two-phase training: classification pretraining, then joint triplet + adversarial
optimization with periodic critic-only GAN blocks."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .critic import Critic
from .codespace import CodePrior, binarize, normalization_factor, normalize_uniform, sample_codes
from .dataset import IdentityDataset, sample_class_batch, sample_triplet_batch
from .errors import ConfigError, DivergenceError, ShapeError
from .losses import (CUHK03_ITERS, CUHK03_LADDER, MarginSchedule, TripletBatch, critic_objective,
                     cross_entropy, generator_objective, margin_at, triplet_loss)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    code_length: int = 64
    extractor_hidden: tuple = (128,)
    extractor_output_activation: str = "relu"
    critic_hidden: tuple = (16,)
    critic_dense: bool = True
    critic_coord_hidden: tuple = (32, 32)  # empty disables the per-coordinate branch
    pretrain_iters: int = 500
    joint_global_iters: int = 2000
    gan_block_every: int = 20
    gan_block_len: int = 10
    critic_steps_per_gan_iter: int = 5
    generator_steps_per_gan_iter: int = 1
    clip_c: float = 1.0
    batch_size_pretrain: int = 64
    batch_size_joint: int = 128
    triplets_per_batch: int = 42
    extractor_optimizer: str = "rmsprop"
    extractor_lr: float = 0.001
    extractor_lr_final: float = 0.0001
    lr_drop_fraction: float = 0.5
    critic_optimizer: str = "rmsprop"
    critic_lr: float = 0.01
    rmsprop_decay: float = 0.9
    generator_weight: float = 1.0
    margin_schedule: str = ""  # empty: CUHK03 ladder stretched to joint_global_iters
    code_p: float = 0.5
    lambda_mode: str = "norm-matching"
    l2_normalize_enabled: bool = True
    rng_seed: int = 0
    query_fraction: float = 0.25
    split_seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        counts = ("code_length", "joint_global_iters", "gan_block_every", "gan_block_len",
                  "critic_steps_per_gan_iter", "batch_size_pretrain", "batch_size_joint",
                  "triplets_per_batch")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("pretrain_iters", "generator_steps_per_gan_iter", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if 3 * self.triplets_per_batch > self.batch_size_joint:
            raise ConfigError("3 * triplets_per_batch exceeds batch_size_joint")
        if self.clip_c <= 0 or self.generator_weight < 0:
            raise ConfigError("clip_c must be positive and generator_weight non-negative")
        object.__setattr__(self, "extractor_hidden", tuple(int(h) for h in self.extractor_hidden))
        object.__setattr__(self, "critic_hidden", tuple(int(h) for h in self.critic_hidden))
        object.__setattr__(self, "critic_coord_hidden", tuple(int(h) for h in self.critic_coord_hidden))
        if not self.critic_dense and not self.critic_coord_hidden:
            raise ConfigError("critic needs the dense or the per-coordinate branch")
        self.prior  # validates code_p / lambda_mode
        self.margins

    @property
    def prior(self):
        try:
            return CodePrior(self.code_length, self.code_p, self.lambda_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def margins(self) -> MarginSchedule:
        try:
            if self.margin_schedule:
                return MarginSchedule.parse(self.margin_schedule)
        except ValueError as exc:
            raise ConfigError(f"bad margin_schedule: {exc}") from exc
        return CUHK03_LADDER.scaled(self.joint_global_iters, CUHK03_ITERS)

    def extractor_lr_at(self, iteration):
        drop = int(self.lr_drop_fraction * self.joint_global_iters)
        return self.extractor_lr if iteration < drop else self.extractor_lr_final

    def extractor_spec(self, input_dim, normalize=None):
        if normalize is None:
            normalize = self.l2_normalize_enabled
        sizes = (input_dim,) + self.extractor_hidden + (self.code_length,)
        return nn.DenseNetSpec(sizes, None, normalize, self.extractor_output_activation)

    def new_critic(self, rng):
        """Fresh critic, clipped so it starts inside the constraint box."""
        critic = Critic.create(self.code_length, self.critic_hidden, self.critic_coord_hidden,
                               self.critic_dense, rng)
        return critic.clip(self.clip_c)


@dataclass
class TrainReport:
    iterations: list = field(default_factory=list)
    triplet_loss: list = field(default_factory=list)
    critic_estimate: list = field(default_factory=list)
    generator_objective: list = field(default_factory=list)
    margin: list = field(default_factory=list)
    pretrain_loss: list = field(default_factory=list)
    pretrain_accuracy: list = field(default_factory=list)
    gan_critic_estimate: list = field(default_factory=list)  # one per critic update
    global_updates: int = 0
    critic_updates: int = 0
    gan_generator_updates: int = 0
    bit_means: np.ndarray = None
    max_critic_abs_after_clip: float = 0.0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if self.pretrain_loss and not self.iterations:
                w.writerow(["iteration", "cross_entropy", "accuracy"])
                for i, (l, a) in enumerate(zip(self.pretrain_loss, self.pretrain_accuracy)):
                    w.writerow([i, repr(l), repr(a)])
                return
            w.writerow(["iteration", "triplet_loss", "critic_estimate", "generator_objective", "margin"])
            for row in zip(self.iterations, self.triplet_loss, self.critic_estimate,
                           self.generator_objective, self.margin):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _check_finite(value, what):
    if not np.isfinite(value):
        raise DivergenceError(f"{what} became non-finite")


def pretrain(extractor: nn.ModelParams, ds: IdentityDataset, config: TrainConfig, rng=None):
    """Classification pretraining with a temporary linear head; no l2 head.

    Returns ``(extractor, report)``; the extractor passed in is not modified.
    """
    rng = np.random.default_rng(config.rng_seed) if rng is None else rng
    ext = extractor.copy()
    ext.opt_state = {}
    spec = config.extractor_spec(ds.dim, normalize=False)
    n_classes = ds.class_ids.size
    head_spec = nn.DenseNetSpec((config.code_length, n_classes))
    head = nn.init_params(head_spec, rng)
    report = TrainReport()
    for it in range(config.pretrain_iters):
        opt = nn.OptimizerConfig(config.extractor_optimizer, config.extractor_lr,
                                 config.rmsprop_decay)
        x, y = sample_class_batch(ds, config.batch_size_pretrain, rng)
        feats, t_ext = nn.forward(ext, spec, x)
        logits, t_head = nn.forward(head, head_spec, feats)
        loss, g_logits = cross_entropy(logits, y)
        _check_finite(loss, "cross-entropy")
        g_head, g_feats = nn.backward(head, head_spec, t_head, g_logits)
        g_ext, _ = nn.backward(ext, spec, t_ext, g_feats)
        nn.optimizer_step(head, g_head, opt)
        nn.optimizer_step(ext, g_ext, opt)
        report.pretrain_loss.append(loss)
        report.pretrain_accuracy.append(float(np.mean(logits.argmax(axis=1) == y)))
    ext.opt_state = {}
    return ext, report


class _Joint:
    """Mutable state of one joint-training run."""

    def __init__(self, extractor, critic, ds, config, rng):
        self.cfg = config
        self.ds = ds
        self.rng = rng
        self.ext = extractor
        self.critic = critic
        self.ext_spec = config.extractor_spec(ds.dim)
        self.prior = config.prior
        self.lam = normalization_factor(self.prior)
        self.critic_opt = nn.OptimizerConfig(config.critic_optimizer, config.critic_lr,
                                             config.rmsprop_decay)
        self.x_all = ds.features.astype(np.float64)

    def ext_opt(self, it):
        return nn.OptimizerConfig(self.cfg.extractor_optimizer, self.cfg.extractor_lr_at(it),
                                  self.cfg.rmsprop_decay)

    def real_batch(self, rows):
        return normalize_uniform(sample_codes(self.prior, rows, self.rng), self.lam)

    def generator_grad(self, z, weight=1.0):
        """Generator objective on ``z`` and its gradient wrt ``z``."""
        scores, cache = self.critic.forward(z)
        value, g = generator_objective(scores)
        _, g_z = self.critic.backward(cache, weight * g)
        return value, scores, g_z

    def global_step(self, it, report):
        cfg = self.cfg
        # anchors must be distinct identities
        n = min(cfg.triplets_per_batch, self.ds.multiview_ids.size)
        alpha = margin_at(cfg.margins, it)
        batch = sample_triplet_batch(self.ds, n, self.rng)
        x = np.vstack([batch.anchors, batch.positives, batch.negatives])
        z, trace = nn.forward(self.ext, self.ext_spec, x)
        t_loss, (ga, gp, gn) = triplet_loss(TripletBatch(z[:n], z[n:2 * n], z[2 * n:]), alpha)
        g_z = np.vstack([ga, gp, gn])
        gen_value, fake_scores, g_gen = self.generator_grad(z, cfg.generator_weight)
        if cfg.generator_weight:
            g_z = g_z + g_gen
        real_scores, _ = self.critic.forward(self.real_batch(z.shape[0]))
        estimate, _ = critic_objective(real_scores, fake_scores)
        for v, what in ((t_loss, "triplet loss"), (estimate, "critic estimate")):
            _check_finite(v, what)
        grads, _ = nn.backward(self.ext, self.ext_spec, trace, g_z)
        nn.optimizer_step(self.ext, grads, self.ext_opt(it))
        report.iterations.append(it)
        report.triplet_loss.append(t_loss)
        report.critic_estimate.append(estimate)
        report.generator_objective.append(gen_value)
        report.margin.append(alpha)
        report.global_updates += 1

    def fake_batch(self):
        idx = self.rng.integers(len(self.ds), size=self.cfg.batch_size_joint)
        return nn.forward(self.ext, self.ext_spec, self.x_all[idx])

    def critic_step(self, report):
        z, _ = self.fake_batch()
        real = self.real_batch(z.shape[0])
        # one pass over real and fake rows together
        scores, cache = self.critic.forward(np.vstack([real, z]))
        k = real.shape[0]
        estimate, (g_r, g_f) = critic_objective(scores[:k], scores[k:])
        _check_finite(estimate, "critic estimate")
        # the critic maximizes the estimate: descend on its negation
        grads, _ = self.critic.backward(cache, -np.concatenate([g_r, g_f]))
        self.critic.step(grads, self.critic_opt)
        self.critic.clip(self.cfg.clip_c)
        report.max_critic_abs_after_clip = max(report.max_critic_abs_after_clip,
                                               self.critic.max_abs())
        report.gan_critic_estimate.append(estimate)
        report.critic_updates += 1

    def gan_generator_step(self, it, report):
        z, trace = self.fake_batch()
        value, _, g_z = self.generator_grad(z)
        _check_finite(value, "generator objective")
        grads, _ = nn.backward(self.ext, self.ext_spec, trace, g_z)
        nn.optimizer_step(self.ext, grads, self.ext_opt(it))
        report.gan_generator_updates += 1

    def gan_block(self, it, report):
        cfg = self.cfg
        for _ in range(cfg.gan_block_len):
            for _ in range(cfg.critic_steps_per_gan_iter):
                self.critic_step(report)
            for _ in range(cfg.generator_steps_per_gan_iter):
                self.gan_generator_step(it, report)


def train_joint(extractor, critic, ds: IdentityDataset, config: TrainConfig, rng=None,
                checkpoint=None):
    """Joint triplet + Wasserstein training.

    Each global iteration takes one extractor step on triplet loss plus the
    weighted generator objective; after every ``gan_block_every`` global
    iterations a GAN block runs ``gan_block_len`` iterations of critic updates
    followed by generator-only extractor updates. ``checkpoint(it, ext, critic)``
    is called every ``checkpoint_every`` global iterations when given.
    Parameters passed in are not modified.
    """
    rng = np.random.default_rng(config.rng_seed + 1) if rng is None else rng
    ext = extractor.copy()
    ext.opt_state = {}
    critic = critic.copy() if critic is not None else config.new_critic(rng)
    if ext.weights[-1].shape[0] != config.code_length:
        raise ShapeError("extractor output size differs from code_length")
    state = _Joint(ext, critic, ds, config, rng)
    report = TrainReport()
    for it in range(config.joint_global_iters):
        state.global_step(it, report)
        if (it + 1) % config.gan_block_every == 0:
            state.gan_block(it, report)
        if checkpoint is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            checkpoint(it + 1, ext, critic)
        if (it + 1) % 500 == 0:
            log.info("iter %d triplet %.4f critic %.5f", it + 1, report.triplet_loss[-1],
                     report.critic_estimate[-1])
    report.bit_means = encode_dataset(ext, config.extractor_spec(ds.dim), ds, state.lam).bits().mean(axis=0)
    return ext, critic, report


def extract(extractor, spec, ds_or_x):
    x = ds_or_x.features if isinstance(ds_or_x, IdentityDataset) else ds_or_x
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != spec.input_dim:
        raise ShapeError(f"records have dim {x.shape[1]}, extractor expects {spec.input_dim}")
    return nn.forward(extractor, spec, x)[0]


def encode_dataset(extractor, spec, ds, lam):
    """Binary codes for every record, in dataset order."""
    return binarize(extract(extractor, spec, ds), lam)


def expected_schedule_counts(config: TrainConfig):
    """Closed-form update counts implied by the GAN schedule."""
    blocks = config.joint_global_iters // config.gan_block_every
    gan_iters = blocks * config.gan_block_len
    return {
        "global_updates": config.joint_global_iters,
        "gan_blocks": blocks,
        "critic_updates": gan_iters * config.critic_steps_per_gan_iter,
        "gan_generator_updates": gan_iters * config.generator_steps_per_gan_iter,
    }


def replace(config: TrainConfig, **changes):
    return dataclasses.replace(config, **changes)
