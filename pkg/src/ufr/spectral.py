"""Frequency-domain global transformation.

The forward transform is unnormalized and the inverse carries the ``1/(H*W)``
factor.  Selected low-frequency bins are multiplied by ``1 + eps`` where
``eps`` is a standard-normal field mirrored so that the perturbed spectrum of
a real image stays Hermitian, which keeps the inverse transform real.
"""
from __future__ import annotations

import numpy as np

from .raster import as_raster, clamp

IMAG_TOL = 1e-5


class SpectralError(ValueError):
    pass


def dft2(grid: np.ndarray) -> np.ndarray:
    """Unnormalized 2-D DFT over the first two axes (extra axes are channels)."""
    grid = np.asarray(grid, dtype=np.float64)
    if not np.all(np.isfinite(grid)):
        raise SpectralError("non-finite input to dft2")
    return np.fft.fft2(grid, axes=(0, 1))


def idft2(spec: np.ndarray, tol: float = IMAG_TOL) -> np.ndarray:
    """Inverse of :func:`dft2`; returns the real part after checking the residue."""
    out = np.fft.ifft2(spec, axes=(0, 1))
    residue = float(np.max(np.abs(out.imag))) if out.size else 0.0
    if residue > tol:
        raise SpectralError(f"imaginary residue {residue:.3g} exceeds {tol}")
    return out.real


def centered_frequencies(n: int) -> np.ndarray:
    """Signed integer frequency of each bin, e.g. n=4 -> [0, 1, -2, -1]."""
    return np.rint(np.fft.fftfreq(n) * n)


def band_pass_mask(h: int, w: int, r: float) -> np.ndarray:
    """Boolean (h, w) mask: True where the centered frequency radius is <= r."""
    if r < 0:
        raise SpectralError(f"radius must be >= 0, got {r}")
    fu = centered_frequencies(h)[:, None]
    fv = centered_frequencies(w)[None, :]
    return np.hypot(fu, fv) <= r


def _mirror_index(n: int) -> np.ndarray:
    return (-np.arange(n)) % n


def noise_field(h: int, w: int, seed) -> np.ndarray:
    """Standard-normal (h, w) field with eps[u, v] == eps[-u, -v]."""
    raw = np.random.default_rng(seed).standard_normal((h, w))
    mu, mv = _mirror_index(h), _mirror_index(w)
    u = np.arange(h)[:, None]
    v = np.arange(w)[None, :]
    # each conjugate pair takes the draw of its lexicographically smaller member
    canonical = (u < mu[:, None]) | ((u == mu[:, None]) & (v <= mv[None, :]))
    return np.where(canonical, raw, raw[np.ix_(mu, mv)])


def randomize_spectrum(
    spec: np.ndarray, band: np.ndarray, seed=None, *, eps: np.ndarray | None = None,
    noise_scale: float = 1.0,
) -> np.ndarray:
    """Scale passed bins by ``1 + noise_scale * eps``; blocked bins are untouched.

    ``eps`` defaults to :func:`noise_field` drawn from ``seed`` and is shared
    by all channels.
    """
    h, w = spec.shape[:2]
    if band.shape != (h, w):
        raise SpectralError(f"band mask {band.shape} vs spectrum {(h, w)}")
    if eps is None:
        eps = noise_field(h, w, seed)
    gain = np.where(band, 1.0 + noise_scale * eps, 1.0)
    if spec.ndim == 3:
        gain = gain[:, :, None]
    return spec * gain


def global_transform_unclamped(x, r: float, seed, noise_scale: float = 1.0) -> np.ndarray:
    x = as_raster(x)
    h, w, _ = x.shape
    spec = dft2(x)
    band = band_pass_mask(h, w, r)
    # G(H*F) + (1-H)*F: randomize_spectrum only touches bins inside the band
    return idft2(randomize_spectrum(spec, band, seed, noise_scale=noise_scale))


def global_transform(x, r: float, seed, noise_scale: float = 1.0) -> np.ndarray:
    return clamp(global_transform_unclamped(x, r, seed, noise_scale))
