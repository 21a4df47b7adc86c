"""Attention maps, significance maps and the attention invariance losses.

Feature maps are ``(C, H, W)`` arrays.  The hard Dice path (binarized maps)
is a metric only; training goes through :func:`soft_dice`, which replaces
set cardinalities by sums and intersection by an elementwise product.
"""
from __future__ import annotations

import numpy as np

THRESHOLD = 0.5
MODES = ("dice_hard", "dice_soft", "mse")


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def attention_map(features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise ValueError("non-finite feature values")
    return sigmoid(features)


def binarize(attn, threshold: float = THRESHOLD) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(attn) >= threshold).astype(np.uint8)


def dice(x1, x2) -> float:
    """1 - (2|X1 & X2| + 1) / (|X1| + |X2| + 1) for binary maps."""
    x1, x2 = np.asarray(x1).astype(bool), np.asarray(x2).astype(bool)
    _same_shape(x1, x2)
    inter = int(np.count_nonzero(x1 & x2))
    total = int(np.count_nonzero(x1)) + int(np.count_nonzero(x2))
    return 1.0 - (2 * inter + 1) / (total + 1)


def _soft_terms(a1, a2, squared):
    num = 2.0 * np.sum(a1 * a2) + 1.0
    if squared:
        den = np.sum(a1 * a1) + np.sum(a2 * a2) + 1.0
    else:
        den = np.sum(a1) + np.sum(a2) + 1.0
    return num, den


def soft_dice(a1, a2, squared: bool = False) -> float:
    """Dice with ``|X| = sum(X)`` and ``X1 & X2 = X1 * X2``.

    ``squared=True`` uses ``sum(X**2)`` for the cardinalities instead.  Both
    agree with :func:`dice` on binary maps; only the squared form is zero for
    every pair of equal maps, which is why the training loss uses it.
    """
    a1, a2 = np.asarray(a1, dtype=np.float64), np.asarray(a2, dtype=np.float64)
    _same_shape(a1, a2)
    num, den = _soft_terms(a1, a2, squared)
    return float(1.0 - num / den)


def soft_dice_grad(a1: np.ndarray, a2: np.ndarray, squared: bool = False) -> tuple[np.ndarray, np.ndarray]:
    num, den = _soft_terms(a1, a2, squared)
    d1 = 2.0 * a1 if squared else 1.0
    d2 = 2.0 * a2 if squared else 1.0
    g1 = -(2.0 * a2 * den - num * d1) / den**2
    g2 = -(2.0 * a1 * den - num * d2) / den**2
    return g1, g2


def mse(a1, a2) -> float:
    a1, a2 = np.asarray(a1, dtype=np.float64), np.asarray(a2, dtype=np.float64)
    _same_shape(a1, a2)
    return float(np.mean((a1 - a2) ** 2))


def attention_loss(f0, fk, mode: str = "dice_soft", threshold: float = THRESHOLD) -> float:
    f0, fk = np.asarray(f0, dtype=np.float64), np.asarray(fk, dtype=np.float64)
    _same_shape(f0, fk)
    a0, ak = attention_map(f0), attention_map(fk)
    if mode == "dice_hard":
        return dice(binarize(a0, threshold), binarize(ak, threshold))
    if mode == "dice_soft":
        return soft_dice(a0, ak, squared=True)
    if mode == "mse":
        return mse(a0, ak)
    raise ValueError(f"unknown attention loss mode {mode!r}")


def gate_features(features, attn) -> np.ndarray:
    features, attn = np.asarray(features, dtype=np.float64), np.asarray(attn, dtype=np.float64)
    _same_shape(features, attn)
    return features * attn


def channel_mean_map(attn) -> np.ndarray:
    """(H, W) channel average of an attention map, for heat-image export."""
    return np.asarray(attn, dtype=np.float64).mean(axis=0)
