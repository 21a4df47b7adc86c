import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ufr.spectral import (
    SpectralError, band_pass_mask, dft2, global_transform, global_transform_unclamped, idft2,
    noise_field, randomize_spectrum,
)


def naive_dft2(g: np.ndarray) -> np.ndarray:
    """Direct O(N^4) evaluation of the unnormalized 2-D DFT."""
    h, w = g.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for m in range(h):
                for n in range(w):
                    acc += g[m, n] * complex(math.cos(-2 * math.pi * (u * m / h + v * n / w)),
                                             math.sin(-2 * math.pi * (u * m / h + v * n / w)))
            out[u, v] = acc
    return out


def test_constant_grid():
    s = dft2(np.ones((2, 2)))
    assert s[0, 0] == 4
    assert np.all(s.ravel()[1:] == 0)


def test_impulse():
    g = np.zeros((3, 4))
    g[0, 0] = 1.0
    np.testing.assert_allclose(dft2(g), np.ones((3, 4)), atol=1e-12)


@pytest.mark.parametrize("n", [8, 16])
def test_matches_naive_oracle(n):
    g = np.random.default_rng(n).random((n, n))
    np.testing.assert_allclose(dft2(g), naive_dft2(g), atol=1e-9)
    assert np.max(np.abs(idft2(dft2(g)) - g)) <= 1e-5


def test_channels_transform_independently():
    x = np.random.default_rng(1).random((5, 6, 3))
    s = dft2(x)
    for c in range(3):
        np.testing.assert_allclose(s[:, :, c], np.fft.fft2(x[:, :, c]), atol=1e-12)


def test_non_finite_rejected():
    with pytest.raises(SpectralError):
        dft2(np.array([[np.nan, 0.0]]))


def test_idft2_rejects_non_hermitian():
    s = np.zeros((4, 4), complex)
    s[0, 1] = 10.0
    with pytest.raises(SpectralError):
        idft2(s)


def test_parseval():
    g = np.random.default_rng(7).random((16, 16))
    lhs = np.sum(g**2)
    rhs = np.sum(np.abs(dft2(g)) ** 2) / g.size
    assert abs(lhs - rhs) <= 1e-4 * lhs


def test_band_pass_dc_only():
    m = band_pass_mask(8, 8, 0)
    assert m.sum() == 1 and m[0, 0]


def test_band_pass_everything():
    diag = math.hypot(8, 6)
    assert band_pass_mask(8, 6, diag / 2).all()


def test_band_pass_radius_one_enumerated():
    # enumerate every bin's signed frequency and distance by hand
    passed = set()
    for u, v in itertools.product(range(8), range(8)):
        fu = u if u <= 4 else u - 8
        fv = v if v <= 4 else v - 8
        if fu * fu + fv * fv <= 1:
            passed.add((u, v))
    assert len(passed) == 5
    assert {tuple(p) for p in np.argwhere(band_pass_mask(8, 8, 1))} == passed


@pytest.mark.parametrize("shape", [(8, 8), (7, 5), (6, 9)])
def test_band_pass_symmetric(shape):
    h, w = shape
    m = band_pass_mask(h, w, 2.5)
    mu, mv = (-np.arange(h)) % h, (-np.arange(w)) % w
    np.testing.assert_array_equal(m, m[np.ix_(mu, mv)])


def test_negative_radius():
    with pytest.raises(SpectralError):
        band_pass_mask(4, 4, -1)


@pytest.mark.parametrize("shape", [(8, 8), (7, 5), (6, 9)])
def test_noise_field_mirrored(shape):
    h, w = shape
    eps = noise_field(h, w, 11)
    mu, mv = (-np.arange(h)) % h, (-np.arange(w)) % w
    np.testing.assert_array_equal(eps, eps[np.ix_(mu, mv)])


def test_randomize_identity_cases():
    x = np.random.default_rng(2).random((6, 6, 3))
    s = dft2(x)
    band = band_pass_mask(6, 6, 2)
    np.testing.assert_array_equal(randomize_spectrum(s, band, eps=np.zeros((6, 6))), s)
    np.testing.assert_array_equal(randomize_spectrum(s, np.zeros((6, 6), bool), 5), s)
    np.testing.assert_array_equal(randomize_spectrum(s, band, 5, noise_scale=0.0), s)


def test_dc_only_randomization_shifts_mean():
    x = np.random.default_rng(3).random((8, 8, 3))
    eps = noise_field(8, 8, 4)
    out = idft2(randomize_spectrum(dft2(x), band_pass_mask(8, 8, 0), eps=eps))
    expected = x + eps[0, 0] * x.mean(axis=(0, 1))
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_noise_ablated_reproduces_input():
    x = np.random.default_rng(5).random((16, 16, 3))
    out = global_transform_unclamped(x, 3, 1, noise_scale=0.0)
    assert np.max(np.abs(out - x)) <= 1e-5


def test_constant_image_dc_case():
    x = np.full((8, 8, 3), 0.4)
    eps = noise_field(8, 8, 9)[0, 0]
    out = global_transform(x, 0, 9)
    np.testing.assert_allclose(out, np.clip(0.4 * (1 + eps), 0, 1), atol=1e-12)


def test_deterministic():
    x = np.random.default_rng(6).random((12, 10, 3))
    a = global_transform(x, 2, 123)
    b = global_transform(x, 2, 123)
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 6))
def test_output_real_and_in_range(seed, r):
    x = np.random.default_rng(seed).random((12, 10, 3))
    spec = randomize_spectrum(dft2(x), band_pass_mask(12, 10, r), seed)
    assert np.max(np.abs(np.fft.ifft2(spec, axes=(0, 1)).imag)) <= 1e-5
    out = global_transform(x, r, seed)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1


def test_radius_zero_changes_only_channel_means():
    x = np.random.default_rng(8).random((10, 10, 3))
    out = global_transform_unclamped(x, 0, 17)
    diff = out - x
    np.testing.assert_allclose(diff, np.broadcast_to(diff[0, 0], diff.shape), atol=1e-12)
