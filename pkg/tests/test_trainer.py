import csv

import numpy as np
import pytest

from abcode import nn
from abcode.codespace import normalization_factor
from abcode.dataset import IdentityDataset, SynthConfig, generate_synthetic
from abcode.errors import ConfigError
from abcode.experiment import quantization_fraction
from abcode.trainer import (TrainConfig, encode_dataset, expected_schedule_counts, extract, pretrain,
                            replace, train_joint)

SMALL = TrainConfig(code_length=16, extractor_hidden=(24,), critic_hidden=(8,), critic_coord_hidden=(4,),
                    pretrain_iters=30, joint_global_iters=40, triplets_per_batch=8, batch_size_joint=32,
                    batch_size_pretrain=32)


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(SynthConfig(num_identities=10, samples_per_view=3, input_dim=12))


def fresh_extractor(cfg, ds, seed=0):
    return nn.init_params(cfg.extractor_spec(ds.dim), seed)


def test_schedule_counts_defaults_40_iters(ds):
    cfg = replace(SMALL, joint_global_iters=40)
    _, critic, rep = train_joint(fresh_extractor(cfg, ds), None, ds, cfg)
    assert rep.global_updates == 40 == len(rep.triplet_loss) == len(rep.critic_estimate)
    assert rep.critic_updates == 100
    assert rep.gan_generator_updates == 20
    assert expected_schedule_counts(TrainConfig(joint_global_iters=40)) == {
        "global_updates": 40, "gan_blocks": 2, "critic_updates": 100, "gan_generator_updates": 20}


@pytest.mark.parametrize("every, length, steps", [(7, 3, 2), (5, 1, 1), (50, 10, 5)])
def test_schedule_counts_match_closed_form(ds, every, length, steps):
    cfg = replace(SMALL, joint_global_iters=25, gan_block_every=every, gan_block_len=length,
                  critic_steps_per_gan_iter=steps)
    _, _, rep = train_joint(fresh_extractor(cfg, ds), None, ds, cfg)
    want = expected_schedule_counts(cfg)
    assert rep.critic_updates == want["critic_updates"]
    assert rep.gan_generator_updates == want["gan_generator_updates"]


def test_clip_invariant(ds):
    cfg = replace(SMALL, clip_c=0.01)
    _, critic, rep = train_joint(fresh_extractor(cfg, ds), None, ds, cfg)
    assert critic.max_abs() <= 0.01
    assert rep.max_critic_abs_after_clip <= 0.01


def test_determinism(ds):
    a = train_joint(fresh_extractor(SMALL, ds), None, ds, SMALL)
    b = train_joint(fresh_extractor(SMALL, ds), None, ds, SMALL)
    assert a[2].triplet_loss == b[2].triplet_loss
    assert a[2].critic_estimate == b[2].critic_estimate
    assert all(np.array_equal(x, y) for x, y in zip(a[0].arrays(), b[0].arrays()))


def test_inputs_not_modified(ds):
    ext = fresh_extractor(SMALL, ds)
    before = [w.copy() for w in ext.arrays()]
    train_joint(ext, None, ds, SMALL)
    pretrain(ext, ds, SMALL)
    assert all(np.array_equal(x, y) for x, y in zip(before, ext.arrays()))


def test_pretrain_zero_iterations_unchanged(ds):
    cfg = replace(SMALL, pretrain_iters=0)
    ext = fresh_extractor(cfg, ds)
    out, rep = pretrain(ext, ds, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(ext.arrays(), out.arrays()))
    assert rep.pretrain_loss == []


def test_pretrain_reduces_cross_entropy():
    ds = generate_synthetic(SynthConfig())
    cfg = TrainConfig()
    _, rep = pretrain(fresh_extractor(cfg, ds), ds, cfg, np.random.default_rng(0))
    assert np.mean(rep.pretrain_loss[-20:]) < np.mean(rep.pretrain_loss[:20])


def test_pretrain_separable_toy_accuracy():
    rng = np.random.default_rng(1)
    centers = np.eye(4) * 3
    x = np.repeat(centers, 20, axis=0) + rng.normal(0, 0.1, (80, 4))
    ids = np.repeat(np.arange(4), 20)
    toy = IdentityDataset(x, ids, np.tile([0, 1], 40))
    cfg = TrainConfig(code_length=8, extractor_hidden=(16,), pretrain_iters=300, batch_size_pretrain=32)
    _, rep = pretrain(fresh_extractor(cfg, toy), toy, cfg)
    assert np.mean(rep.pretrain_accuracy[-20:]) >= 0.95


def test_no_l2_ablation_runs(ds):
    cfg = replace(SMALL, l2_normalize_enabled=False)
    ext, _, rep = train_joint(fresh_extractor(cfg, ds), None, ds, cfg)
    assert cfg.extractor_spec(ds.dim).final_l2_normalize is False
    assert np.all(np.isfinite(rep.triplet_loss))
    assert encode_dataset(ext, cfg.extractor_spec(ds.dim), ds, 2.0).m == 16


def test_triplet_only_mode(ds):
    cfg = replace(SMALL, generator_weight=0.0)
    _, _, rep = train_joint(fresh_extractor(cfg, ds), None, ds, cfg)
    assert rep.global_updates == 40


def test_margin_recorded_follows_scaled_ladder(ds):
    cfg = replace(SMALL, joint_global_iters=60, gan_block_every=60)
    _, _, rep = train_joint(fresh_extractor(cfg, ds), None, ds, cfg)
    # CUHK03 ladder stretched from 6000 to 60 iterations
    assert rep.margin[0] == 0.2 and rep.margin[10] == 0.3 and rep.margin[25] == 0.4 and rep.margin[59] == 0.5


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(gan_block_every=0)
    with pytest.raises(ConfigError):
        TrainConfig(triplets_per_batch=50)
    with pytest.raises(ConfigError):
        TrainConfig(margin_schedule="0:0.2;5")
    with pytest.raises(ConfigError):
        TrainConfig(lambda_mode="nope")
    assert TrainConfig().extractor_lr_at(999) == 0.001 and TrainConfig().extractor_lr_at(1000) == 0.0001


def test_encode_dataset_shape_and_determinism(ds):
    spec = SMALL.extractor_spec(ds.dim)
    ext = fresh_extractor(SMALL, ds, 3)
    lam = normalization_factor(SMALL.prior)
    a = encode_dataset(ext, spec, ds, lam)
    assert len(a) == len(ds) and a.m == 16
    assert a == encode_dataset(ext, spec, ds, lam)


def test_report_csv(tmp_path, ds):
    _, _, rep = train_joint(fresh_extractor(SMALL, ds), None, ds, SMALL)
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["iteration", "triplet_loss", "critic_estimate", "generator_objective", "margin"]
    assert len(rows) == 41


def test_checkpoint_callback(ds):
    seen = []
    cfg = replace(SMALL, checkpoint_every=15)
    train_joint(fresh_extractor(cfg, ds), None, ds, cfg, checkpoint=lambda it, e, c: seen.append(it))
    assert seen == [15, 30]


def test_codes_stable_under_small_perturbation():
    """Entries sitting near 0 or 1/lambda keep their bit under a +-1% input change."""
    ds = generate_synthetic(SynthConfig(num_identities=8, samples_per_view=4, input_dim=16))
    cfg = TrainConfig(code_length=32, extractor_hidden=(48,), critic_hidden=(16,), pretrain_iters=100,
                      joint_global_iters=400, triplets_per_batch=8)
    rng = np.random.default_rng(0)
    ext, _ = pretrain(fresh_extractor(cfg, ds), ds, cfg, rng)
    ext, _, _ = train_joint(ext, None, ds, cfg, rng)
    spec = cfg.extractor_spec(ds.dim)
    lam = normalization_factor(cfg.prior)
    z = extract(ext, spec, ds)
    near = np.minimum(np.abs(z), np.abs(z - 1 / lam)) <= 0.25 / lam
    x = ds.features.astype(np.float64)
    noise = np.random.default_rng(1).uniform(-0.01, 0.01, x.shape)
    z2 = extract(ext, spec, x * (1 + noise))
    same = (z > 0.5 / lam) == (z2 > 0.5 / lam)
    assert near.mean() > 0.5
    assert same[near].mean() >= 0.95
    assert quantization_fraction(z, lam) == pytest.approx(near.mean())
