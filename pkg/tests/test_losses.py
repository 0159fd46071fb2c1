import numpy as np
import pytest
from hypothesis import given, strategies as st

from abcode.codespace import BinaryCodes, normalize_uniform
from abcode.errors import ShapeError
from abcode.losses import (CUHK03_LADDER, DIST_EPS, DUKE_LADDER, MARKET1501_LADDER, MarginSchedule,
                           TripletBatch, critic_objective, cross_entropy, euclidean,
                           generator_objective, margin_at, triplet_loss)


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        o = flat[k]
        flat[k] = o + h
        lp = f()
        flat[k] = o - h
        lm = f()
        flat[k] = o
        gf[k] = (lp - lm) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def test_euclidean_examples():
    assert euclidean([0, 0], [3, 4]) == pytest.approx(5.0)
    assert euclidean([1, 2], [1, 2]) == pytest.approx(np.sqrt(DIST_EPS))
    assert euclidean([1, 2], [1, 2]) < 1e-5
    a = normalize_uniform(BinaryCodes.from_bits([1, 1, 0, 0]), 1.0)[0]
    b = normalize_uniform(BinaryCodes.from_bits([0, 1, 1, 0]), 1.0)[0]
    assert euclidean(a, b) == pytest.approx(np.sqrt(2))
    with pytest.raises(ShapeError):
        euclidean([1, 2], [1, 2, 3])


def _triplet_with_distances(dap, dan):
    # anchor at origin, positive / negative along separate axes
    return TripletBatch(np.zeros((1, 2)), np.array([[dap, 0.0]]), np.array([[0.0, dan]]))


def test_triplet_examples():
    loss, grads = triplet_loss(_triplet_with_distances(0.2, 0.5), 0.2)
    assert loss == pytest.approx(0.0)
    assert all(np.all(g == 0) for g in grads)
    loss, _ = triplet_loss(_triplet_with_distances(0.5, 0.4), 0.3)
    assert loss == pytest.approx(0.4)


def test_triplet_hinge_point_is_inactive():
    batch = TripletBatch(np.zeros((1, 1)), np.array([[0.25]]), np.array([[0.75]]))
    dap = euclidean(batch.anchors, batch.positives)[0]
    dan = euclidean(batch.anchors, batch.negatives)[0]
    # fl(dan - dap) == -fl(dap - dan), so the hinge argument is exactly 0
    loss, grads = triplet_loss(batch, dan - dap)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


@pytest.mark.parametrize("seed", range(20))
def test_triplet_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a, p, n = rng.standard_normal((3, 6, 5))
    batch = TripletBatch(a, p, n)
    alpha = 1.0

    def f():
        return triplet_loss(batch, alpha)[0]

    _, analytic = triplet_loss(batch, alpha)
    for arr, an in zip((a, p, n), analytic):
        assert max_rel_err(central_diff(f, arr), an) < 1e-4


@given(st.integers(0, 2**32), st.floats(0.01, 2.0))
def test_triplet_nonnegative_and_zero_iff_margins_met(seed, alpha):
    rng = np.random.default_rng(seed)
    a, p, n = rng.standard_normal((3, 4, 3))
    loss, _ = triplet_loss(TripletBatch(a, p, n), alpha)
    assert loss >= 0
    met = euclidean(a, n) >= euclidean(a, p) + alpha
    assert (loss == 0) == bool(np.all(met))


def test_critic_objective_examples():
    assert critic_objective([1, 1], [0, 0])[0] == 1.0
    assert critic_objective([0.3, 0.3], [0.3, 0.3])[0] == 0.0
    with pytest.raises(ValueError):
        critic_objective([], [1.0])


@pytest.mark.parametrize("seed", range(20))
def test_critic_objective_gradient(seed):
    rng = np.random.default_rng(seed)
    r, f = rng.standard_normal(5), rng.standard_normal(7)
    _, (gr, gf) = critic_objective(r, f)
    assert max_rel_err(central_diff(lambda: critic_objective(r, f)[0], r), gr) < 1e-4
    assert max_rel_err(central_diff(lambda: critic_objective(r, f)[0], f), gf) < 1e-4
    assert np.allclose(gr, 1 / 5) and np.allclose(gf, -1 / 7)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_critic_objective_antisymmetric(r, f):
    assert critic_objective(r, f)[0] == pytest.approx(-critic_objective(f, r)[0], abs=1e-12)


def test_generator_objective():
    assert generator_objective([0.5]) == (-0.5, pytest.approx([-1.0]))
    s = np.array([0.1, 0.4, -0.2])
    v0, g0 = generator_objective(s)
    v1, g1 = generator_objective(s + 3.0)
    assert v1 == pytest.approx(v0 - 3.0)
    assert np.array_equal(g0, g1)
    assert np.allclose(g0, -1 / 3)
    with pytest.raises(ValueError):
        generator_objective([])


@pytest.mark.parametrize("seed", range(20))
def test_generator_objective_gradient(seed):
    s = np.random.default_rng(seed).standard_normal(6)
    _, g = generator_objective(s)
    assert max_rel_err(central_diff(lambda: generator_objective(s)[0], s), g) < 1e-4


def test_cross_entropy_examples():
    assert cross_entropy(np.zeros((1, 4)), [2])[0] == pytest.approx(np.log(4), abs=1e-5)
    logits = np.array([[50.0, 0.0, 0.0]])
    assert cross_entropy(logits, [0])[0] < 1e-20
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 3)), [3])


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((5, 4)) * 2
    y = rng.integers(0, 4, 5)
    _, g = cross_entropy(z, y)
    assert max_rel_err(central_diff(lambda: cross_entropy(z, y)[0], z), g) < 1e-4


@pytest.mark.parametrize("it, expected", [(0, 0.2), (999, 0.2), (1000, 0.3), (2500, 0.4), (5999, 0.5)])
def test_margin_ladder_cuhk03(it, expected):
    assert margin_at(CUHK03_LADDER, it) == expected


@pytest.mark.parametrize("ladder", [CUHK03_LADDER, MARKET1501_LADDER, DUKE_LADDER])
def test_margin_non_decreasing(ladder):
    values = [margin_at(ladder, i) for i in range(0, 9000, 50)]
    assert values == sorted(values)


def test_margin_schedule_validation_and_scaling():
    with pytest.raises(ValueError):
        MarginSchedule(((5, 0.2),))
    with pytest.raises(ValueError):
        MarginSchedule(((0, 0.2), (10, 0.3), (10, 0.4)))
    scaled = CUHK03_LADDER.scaled(2000, 6000)
    assert scaled.ladder == ((0, 0.2), (333, 0.3), (833, 0.4), (1333, 0.5))
    assert MarginSchedule.parse(str(scaled)) == scaled
