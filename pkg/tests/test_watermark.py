import math

import numpy as np
import pytest

from diffprint import autodiff as F
from diffprint.errors import DimensionError
from diffprint.watermark import (Anchor, bce_loss, bits_to_str, decode_hard, decode_soft, embed, make_anchor,
                                 make_key, random_message, str_to_bits)

from conftest import central_diff, rel_err

SOFTPLUS_MINUS_4 = 0.018149927917809740355  # log(1 + e^-4), mpmath 30 digits
PHI_MINUS_5 = 2.8665157187919391167e-7
PHI_MINUS_2 = 0.0227501319481792072


def test_full_key_is_orthonormal_basis():
    key = make_key(3, 16, 16)
    np.testing.assert_allclose(key.patterns @ key.patterns.T, np.eye(16), atol=1e-10)
    off = key.patterns @ key.patterns.T - np.eye(16)
    assert np.max(np.abs(off)) <= 1e-10


def test_key_is_seeded():
    assert np.array_equal(make_key(5, 8, 16).patterns, make_key(5, 8, 16).patterns)
    assert not np.array_equal(make_key(5, 8, 16).patterns, make_key(6, 8, 16).patterns)


@pytest.mark.parametrize("args", [(0, 17, 16), (0, 0, 16), (0, 4, 16, 0.0), (0, 4, 16, 0.5, -1.0)])
def test_key_validation(args):
    with pytest.raises(ValueError):
        make_key(*args)


def test_round_trip_on_random_cases(key):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        m = random_message(16, rng)
        assert np.array_equal(decode_hard(embed(rng.normal(0, 3, 16), m, key), key), m)


def test_all_ones_projects_to_beta(key):
    I_w = embed(np.random.default_rng(1).standard_normal(16), np.ones(16, dtype=int), key)
    np.testing.assert_allclose(key.patterns @ I_w, key.beta, atol=1e-12)


def test_embedding_distortion():
    """|I_w - I_0|^2 = |proj|^2 + k beta^2 - 2 beta <P I_0, s>; the cross term vanishes on average over messages."""
    key = make_key(2, 10, 16, beta=0.3)
    rng = np.random.default_rng(2)
    all_msgs = (np.arange(2 ** 10)[:, None] >> np.arange(10)) & 1
    for _ in range(5):
        carrier = rng.standard_normal(16)
        coords = key.patterns @ carrier
        proj2 = float(np.sum(coords ** 2))
        dists = [np.sum((embed(carrier, m, key) - carrier) ** 2) for m in all_msgs]
        for m, d in zip(all_msgs[:50], dists[:50]):
            assert d == pytest.approx(proj2 + 10 * 0.09 - 2 * 0.3 * coords @ (2 * m - 1), rel=1e-12)
        assert np.mean(dists) == pytest.approx(proj2 + 10 * 0.09, rel=1e-12)
    # carrier already orthogonal to the pattern span: distortion is k beta^2 exactly
    carrier = rng.standard_normal(16)
    carrier -= key.patterns.T @ (key.patterns @ carrier)
    m = random_message(10, rng)
    assert np.sum((embed(carrier, m, key) - carrier) ** 2) == pytest.approx(10 * 0.09, rel=1e-12)


def test_zero_image_decodes_to_zero_bits(key):
    assert np.all(F.value(decode_soft(np.zeros(16), key)) == 0)
    assert np.all(decode_hard(np.zeros(16), key) == 0)


def test_clean_logits_are_plus_minus_kappa_beta(key):
    m = random_message(16, np.random.default_rng(3))
    logits = decode_soft(embed(np.random.default_rng(4).standard_normal(16), m, key), key)
    np.testing.assert_allclose(logits, key.kappa * key.beta * (2 * m - 1), atol=1e-12)


@pytest.mark.parametrize("beta,expected", [(0.5, PHI_MINUS_5), (0.2, PHI_MINUS_2)])
def test_noisy_bit_error_rate(beta, expected):
    """Gaussian noise of std 0.1 flips a bit with probability Phi(-beta / 0.1); 10^5 trials."""
    key = make_key(9, 16, 16, beta=beta)
    rng = np.random.default_rng(10)
    n = 100_000
    m = rng.integers(0, 2, (n, 16))
    carriers = rng.standard_normal((n, 16))
    P = key.patterns
    images = carriers - (carriers @ P.T) @ P + beta * (2 * m - 1) @ P + 0.1 * rng.standard_normal((n, 16))
    errors = int(np.sum(((images @ P.T) > 0).astype(int) != m))
    bits = n * 16
    mean = bits * expected
    # Poisson-binomial tolerance: 3 standard deviations plus one count of slack
    assert abs(errors - mean) <= 3 * math.sqrt(mean) + 1


def test_bce_values(key):
    assert float(bce_loss(np.zeros(16), np.ones(16))) == pytest.approx(math.log(2), abs=1e-15)
    m = random_message(16, np.random.default_rng(5))
    key4 = make_key(1, 16, 16, beta=0.5, kappa=8.0)
    logits = decode_soft(embed(np.random.default_rng(6).standard_normal(16), m, key4), key4)
    assert float(bce_loss(logits, m)) == pytest.approx(SOFTPLUS_MINUS_4, rel=1e-12)


def test_bce_increases_when_one_bit_flips():
    logits = np.array([2.0, -1.0, 3.0, -0.5])
    m = np.array([1, 0, 1, 0])
    base = float(bce_loss(logits, m))
    for j in range(4):
        flipped = logits.copy()
        flipped[j] = -flipped[j]
        assert float(bce_loss(flipped, m)) > base


def test_bce_gradient_wrt_image(key):
    m = random_message(16, np.random.default_rng(7))
    x = np.random.default_rng(8).standard_normal(16) * 0.3

    def loss(y):
        return bce_loss(decode_soft(y, key), m)

    tape = F.Tape()
    v = tape.leaf(x)
    (g,) = tape.backward(loss(v), [v])
    assert rel_err(g, central_diff(lambda y: float(loss(y)), x)) <= 1e-6


def test_decode_soft_is_linear(key):
    rng = np.random.default_rng(11)
    a, b = rng.standard_normal(16), rng.standard_normal(16)
    np.testing.assert_allclose(decode_soft(2 * a - 3 * b, key),
                               2 * decode_soft(a, key) - 3 * decode_soft(b, key), atol=1e-12)


@pytest.mark.parametrize("k", range(8, 17))
def test_payload_sweep_round_trip(k):
    key = make_key(13, k, 16)
    rng = np.random.default_rng(k)
    for _ in range(200):
        m = random_message(k, rng)
        assert np.array_equal(decode_hard(embed(rng.standard_normal(16), m, key), key), m)


def test_dimension_checks(key):
    with pytest.raises(DimensionError):
        embed(np.zeros(8), np.zeros(16, dtype=int), key)
    with pytest.raises(DimensionError):
        decode_soft(np.zeros(8), key)
    with pytest.raises(ValueError):
        embed(np.zeros(16), np.zeros(15, dtype=int), key)


def test_bit_strings():
    assert bits_to_str([1, 0, 1]) == "101"
    assert np.array_equal(str_to_bits("0110"), [0, 1, 1, 0])
    with pytest.raises(ValueError):
        str_to_bits("012")


def test_anchor_serialization(key):
    a = make_anchor(np.random.default_rng(0).standard_normal(16), random_message(16, np.random.default_rng(1)), key)
    d = a.to_dict()
    assert isinstance(d["message"], str) and len(d["message"]) == 16
    b = Anchor.from_dict(d)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.message, b.message)
    assert np.array_equal(decode_hard(a.image, key), a.message)
