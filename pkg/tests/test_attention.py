import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ufr.attention import (
    attention_loss, attention_map, binarize, channel_mean_map, dice, gate_features, mse,
    sigmoid, soft_dice, soft_dice_grad,
)


def test_sigmoid_values():
    assert np.all(attention_map(np.zeros((2, 3, 3))) == 0.5)
    assert np.all(attention_map(np.full((1, 2, 2), 100.0)) >= 1 - 1e-6)
    assert sigmoid(2.0) == pytest.approx(0.880797, abs=1e-6)


def test_sigmoid_extremes_stay_finite():
    out = sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_attention_map_rejects_non_finite():
    with pytest.raises(ValueError):
        attention_map(np.array([[[np.inf]]]))


def test_binarize_cases():
    assert np.all(binarize(np.full((2, 2), 0.5)) == 1)
    assert np.all(binarize(np.full((2, 2), 0.49)) == 0)
    checker = np.where((np.add.outer(np.arange(4), np.arange(4)) % 2) == 0, 0.3, 0.7)
    np.testing.assert_array_equal(binarize(checker), (checker > 0.5).astype(np.uint8))
    with pytest.raises(ValueError):
        binarize(checker, 1.0)


def test_dice_cases():
    x = np.zeros((4, 4), bool)
    x[0] = True
    y = np.zeros((4, 4), bool)
    y[3] = True
    assert dice(x, x) == 0.0
    assert dice(x, y) == 1 - 1 / 9
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 0.0
    with pytest.raises(ValueError):
        dice(x, np.zeros((3, 3)))


def test_dice_brute_force_all_2x2_pairs():
    maps = [np.array(bits, bool).reshape(2, 2) for bits in itertools.product([0, 1], repeat=4)]
    for a, b in itertools.product(maps, maps):
        # count from explicit pixel lists
        inter = sum(1 for p, q in zip(a.ravel(), b.ravel()) if p and q)
        expected = 1 - (2 * inter + 1) / (sum(a.ravel()) + sum(b.ravel()) + 1)
        assert dice(a, b) == expected
        assert dice(a, b) == dice(b, a)
        assert 0 <= dice(a, b) < 1


def test_soft_dice_limits_and_hand_case():
    ones = np.ones((2, 2))
    assert soft_dice(ones, ones) == 0.0
    a = np.array([[0.2, 0.4], [0.6, 0.8]])
    # sum a^2 = 0.04+0.16+0.36+0.64 = 1.2, sum a = 2.0
    assert soft_dice(a, a) == pytest.approx(1 - (2 * 1.2 + 1) / (2 * 2.0 + 1), abs=1e-12)


def test_soft_dice_equals_hard_on_binary_maps():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.random((2, 3, 3)) < 0.5, rng.random((2, 3, 3)) < 0.5
        assert soft_dice(a.astype(float), b.astype(float)) == pytest.approx(dice(a, b), abs=1e-12)
        assert soft_dice(a.astype(float), b.astype(float), squared=True) == pytest.approx(dice(a, b), abs=1e-12)


@pytest.mark.parametrize("squared", [False, True])
def test_soft_dice_gradient_matches_central_differences(squared):
    rng = np.random.default_rng(1)
    a1, a2 = rng.random((4, 4)), rng.random((4, 4))
    g1, g2 = soft_dice_grad(a1, a2, squared)
    eps = 1e-6
    for arr, g, which in ((a1, g1, 0), (a2, g2, 1)):
        for idx in np.ndindex(arr.shape):
            p, m = arr.copy(), arr.copy()
            p[idx] += eps
            m[idx] -= eps
            args_p = (p, a2) if which == 0 else (a1, p)
            args_m = (m, a2) if which == 0 else (a1, m)
            num = (soft_dice(*args_p, squared=squared) - soft_dice(*args_m, squared=squared)) / (2 * eps)
            assert abs(num - g[idx]) <= 1e-5 * max(abs(num), abs(g[idx]))


def test_attention_loss_modes():
    f = np.random.default_rng(2).standard_normal((3, 4, 4))
    for mode in ("dice_hard", "dice_soft", "mse"):
        assert attention_loss(f, f, mode) == pytest.approx(0.0, abs=1e-15)
    shape = (2, 3, 4)
    n = int(np.prod(shape))
    assert attention_loss(np.full(shape, 10.0), np.full(shape, -10.0), "dice_hard") == 1 - 1 / (n + 1)
    with pytest.raises(ValueError):
        attention_loss(f, f, "l1")
    with pytest.raises(ValueError):
        attention_loss(f, f[:2], "mse")


def test_mse_constant_difference():
    a = np.full((2, 3, 3), 0.4)
    assert mse(a, a + 0.1) == pytest.approx(0.01, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["dice_hard", "dice_soft", "mse"]))
def test_attention_loss_channel_permutation_invariant(seed, mode):
    rng = np.random.default_rng(seed)
    f0, fk = rng.standard_normal((2, 5, 3, 3))
    perm = rng.permutation(5)
    assert attention_loss(f0[perm], fk[perm], mode) == pytest.approx(attention_loss(f0, fk, mode), abs=1e-12)


def test_gate_features():
    f = np.random.default_rng(3).standard_normal((2, 3, 3))
    np.testing.assert_array_equal(gate_features(f, np.ones_like(f)), f)
    assert np.all(gate_features(np.zeros((2, 2, 2)), np.full((2, 2, 2), 0.3)) == 0)
    assert gate_features(np.array([2.0]), sigmoid(np.array([2.0])))[0] == pytest.approx(1.761594, abs=1e-5)
    with pytest.raises(ValueError):
        gate_features(f, f[0])


def test_channel_mean_map():
    a = np.stack([np.zeros((2, 2)), np.ones((2, 2))])
    np.testing.assert_array_equal(channel_mean_map(a), np.full((2, 2), 0.5))
