import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from abcode.codespace import (NORM_MATCHING, PAPER_LITERAL, BinaryCodes, CodePrior, binarize,
                              hamming, load_codes, normalization_factor, normalize_l2,
                              normalize_uniform, pack, sample_codes, save_codes, unpack)
from abcode.errors import DegeneratePriorError, EmptyDatasetError, FormatError, ShapeError, ZeroVectorError


def bits_strategy(max_m=200):
    return st.integers(1, max_m).flatmap(
        lambda m: hnp.arrays(np.uint8, st.tuples(st.integers(1, 4), st.just(m)), elements=st.integers(0, 1)))


def naive_hamming(a_bits, b_bits):
    return sum(int(x != y) for x, y in zip(a_bits, b_bits))


# --- packing ---------------------------------------------------------------

@given(bits_strategy())
def test_pack_roundtrip(bits):
    words = pack(bits)
    assert words.dtype == np.uint64
    assert np.array_equal(unpack(words, bits.shape[1]), bits)


@given(bits_strategy())
def test_trailing_bits_are_zero(bits):
    m = bits.shape[1]
    words = pack(bits)
    if m % 64:
        assert np.all(words[:, -1] >> np.uint64(m % 64) == 0)


def test_little_endian_bit_order():
    bits = np.zeros(70, np.uint8)
    bits[0] = bits[65] = 1
    words = pack(bits)
    assert words.tolist() == [1, 2]


def test_binary_codes_rejects_dirty_trailing_bits():
    with pytest.raises(ValueError):
        BinaryCodes(np.array([[1 << 10]], dtype=np.uint64), 4)


# --- sampling --------------------------------------------------------------

@pytest.mark.parametrize("p, expected", [(1.0, [1, 1, 1, 1]), (0.0, [0, 0, 0, 0])])
def test_sample_degenerate(p, expected):
    codes = sample_codes(CodePrior(4, p), 1, 3)
    assert codes.bits()[0].tolist() == expected


def test_sample_balanced_and_deterministic():
    prior = CodePrior(256, 0.5)
    codes = sample_codes(prior, 10000, 7)
    means = codes.bits().mean(axis=0)
    assert means.min() >= 0.48 and means.max() <= 0.52
    assert codes == sample_codes(prior, 10000, 7)


def test_prior_validation():
    with pytest.raises(ValueError):
        CodePrior(0)
    with pytest.raises(ValueError):
        CodePrior(4, 1.5)
    with pytest.raises(ValueError):
        CodePrior(4, 0.5, "bogus")


# --- normalization factor --------------------------------------------------

@pytest.mark.parametrize("m, mode, expected", [
    (4, PAPER_LITERAL, 1.0),
    (4, NORM_MATCHING, 1.41421356),
    (2048, PAPER_LITERAL, 22.62742),
])
def test_normalization_factor(m, mode, expected):
    assert normalization_factor(CodePrior(m, 0.5, mode)) == pytest.approx(expected, abs=1e-5)


def test_norm_matching_gives_unit_expected_norm():
    prior = CodePrior(512, 0.5, NORM_MATCHING)
    lam = normalization_factor(prior)
    emb = normalize_uniform(sample_codes(prior, 4000, 1), lam)
    assert np.mean(np.sum(emb**2, axis=1)) == pytest.approx(1.0, abs=0.01)


def test_zero_p_is_degenerate():
    with pytest.raises(DegeneratePriorError):
        normalization_factor(CodePrior(4, 0.0))


# --- normalizations and binarization ---------------------------------------

@pytest.mark.parametrize("bits, lam, expected", [
    ([1, 0, 1, 0], 1.0, [1, 0, 1, 0]),
    ([1, 1, 1, 1], 2.0, [0.5, 0.5, 0.5, 0.5]),
    ([0, 0, 0, 0], 5.0, [0, 0, 0, 0]),
])
def test_normalize_uniform(bits, lam, expected):
    assert np.allclose(normalize_uniform(BinaryCodes.from_bits(bits), lam)[0], expected)


def test_normalize_uniform_rejects_bad_lambda():
    with pytest.raises(ValueError):
        normalize_uniform([1, 0], 0.0)


@pytest.mark.parametrize("v, expected", [
    ([1, 1, 0, 0], [0.70710678, 0.70710678, 0, 0]),
    ([3, 4], [0.6, 0.8]),
])
def test_normalize_l2(v, expected):
    assert np.allclose(normalize_l2(v), expected)


def test_normalize_l2_zero():
    with pytest.raises(ZeroVectorError):
        normalize_l2([0, 0, 0])


@given(hnp.arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e3, 1e3)))
def test_normalize_l2_unit_norm(v):
    if np.linalg.norm(v) <= 1e-6:
        return
    assert abs(np.linalg.norm(normalize_l2(v)) - 1.0) < 1e-9


@pytest.mark.parametrize("z, lam, expected", [
    ([0.9, 0.1, 0.6, 0.4], 1.0, [1, 0, 1, 0]),
    ([0.5], 1.0, [0]),
    ([0.03, 0.01], 22.62742, [1, 0]),
])
def test_binarize(z, lam, expected):
    assert binarize(z, lam).bits()[0].tolist() == expected


@given(bits_strategy(), st.sampled_from([0.3, 1.0, 5.656854, 22.62742]))
def test_binarize_inverts_embedding(bits, lam):
    codes = BinaryCodes.from_bits(bits)
    assert binarize(normalize_uniform(codes, lam), lam) == codes


# --- Hamming ---------------------------------------------------------------

def test_hamming_examples():
    a = BinaryCodes.from_bits([1, 0, 1, 0])
    b = BinaryCodes.from_bits([0, 1, 1, 0])
    assert hamming(a, b) == 2
    assert hamming(a, a) == 0


def test_hamming_length_mismatch():
    with pytest.raises(ShapeError):
        hamming(BinaryCodes.from_bits([1, 0]), BinaryCodes.from_bits([1, 0, 1]))


def test_hamming_matches_naive_loop_4096():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.integers(0, 2, (2, 4096), dtype=np.uint8)
        assert hamming(BinaryCodes.from_bits(a), BinaryCodes.from_bits(b)) == naive_hamming(a, b)


@settings(max_examples=50)
@given(st.integers(1, 300), st.integers(0, 2**32))
def test_hamming_metric_axioms(m, seed):
    rng = np.random.default_rng(seed)
    x, y, z = (BinaryCodes.from_bits(rng.integers(0, 2, m, dtype=np.uint8)) for _ in range(3))
    assert hamming(x, y) == hamming(y, x)
    assert (hamming(x, y) == 0) == (x == y)
    assert hamming(x, z) <= hamming(x, y) + hamming(y, z)


@settings(max_examples=50)
@given(st.integers(1, 300), st.integers(0, 2**32), st.floats(0.1, 50))
def test_hamming_euclidean_identity(m, seed, lam):
    rng = np.random.default_rng(seed)
    a, b = (BinaryCodes.from_bits(rng.integers(0, 2, m, dtype=np.uint8)) for _ in range(2))
    d2 = np.sum((normalize_uniform(a, lam) - normalize_uniform(b, lam)) ** 2)
    assert abs(d2 * lam**2 - hamming(a, b)) <= 1e-9 * max(1, m)


# --- ABCB files ------------------------------------------------------------

def test_abcb_roundtrip(tmp_path):
    codes = sample_codes(CodePrior(100), 7, 2)
    path = tmp_path / "c.abcb"
    save_codes(path, codes)
    data = path.read_bytes()
    assert data[:4] == b"ABCB" and len(data) == 4 + 4 + 8 + 4 + 7 * 2 * 8
    assert load_codes(path) == codes
    save_codes(tmp_path / "again.abcb", load_codes(path))
    assert (tmp_path / "again.abcb").read_bytes() == data


def test_abcb_rejects_corruption(tmp_path):
    path = tmp_path / "c.abcb"
    save_codes(path, sample_codes(CodePrior(64), 3, 0))
    data = path.read_bytes()
    (tmp_path / "magic.abcb").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_codes(tmp_path / "magic.abcb")
    (tmp_path / "short.abcb").write_bytes(data[:-1])
    with pytest.raises(FormatError):
        load_codes(tmp_path / "short.abcb")
    (tmp_path / "empty.abcb").write_bytes(data[:8] + (0).to_bytes(8, "little") + data[16:20])
    with pytest.raises(EmptyDatasetError):
        load_codes(tmp_path / "empty.abcb")
