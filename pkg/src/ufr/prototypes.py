"""Confidence filtering, KL consistency, category prototypes and diagnostics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CONFIDENCE_THRESHOLD = 0.7
TEMPERATURE = 0.2
PROB_FLOOR = 1e-12


@dataclass
class RoiFeature:
    vector: np.ndarray
    category: int
    confidence: float

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("ROI feature vector must be finite")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def filter_proposals(feats: Sequence[RoiFeature], t: float = CONFIDENCE_THRESHOLD) -> list[RoiFeature]:
    """Keep features whose confidence is strictly above ``t``."""
    keep = confident_indices([f.confidence for f in feats], t)
    return [feats[i] for i in keep]


def confident_indices(confidences: Iterable[float], t: float = CONFIDENCE_THRESHOLD) -> list[int]:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {t}")
    return [i for i, c in enumerate(confidences) if c > t]


# --- explicit constraint ----------------------------------------------------


def check_distributions(p: np.ndarray, tol: float = 1e-6) -> None:
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("distribution has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ValueError("distribution does not sum to 1")


def _pairs(p0, pk) -> tuple[np.ndarray, np.ndarray]:
    p0, pk = np.atleast_2d(np.asarray(p0, dtype=np.float64)), np.atleast_2d(np.asarray(pk, dtype=np.float64))
    if p0.shape != pk.shape:
        raise ValueError(f"matched distributions differ in shape: {p0.shape} vs {pk.shape}")
    check_distributions(p0)
    check_distributions(pk)
    return p0, pk


def explicit_loss(p0, pk) -> float:
    """Mean over matched pairs of KL(p0 || pk); zero-probability terms of p0 vanish."""
    p0, pk = _pairs(p0, pk)
    if p0.shape[0] == 0:
        return 0.0
    q = np.maximum(pk, PROB_FLOOR)
    pos = p0 > 0
    terms = np.where(pos, p0 * (np.log(np.where(pos, p0, 1.0)) - np.log(q)), 0.0)
    return float(terms.sum() / p0.shape[0])


def explicit_loss_grad(p0: np.ndarray, pk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = p0.shape[0]
    q = np.maximum(pk, PROB_FLOOR)
    pos = p0 > 0
    g0 = np.where(pos, np.log(np.where(pos, p0, 1.0)) - np.log(q) + 1.0, 0.0) / n
    gk = np.where(pk > PROB_FLOOR, -p0 / q, 0.0) / n
    return g0, gk


# --- prototypes -------------------------------------------------------------


@dataclass
class PrototypeRegistry:
    """Per-category prototype vectors.

    ``mode="cumulative"`` keeps the exact arithmetic mean of everything
    accumulated; ``mode="ema"`` blends new samples in with ``momentum``.
    """

    categories: tuple[int, ...]
    dim: int
    mode: str = "cumulative"
    momentum: float = 0.9
    means: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("cumulative", "ema"):
            raise ValueError(f"unknown prototype mode {self.mode!r}")
        self.categories = tuple(int(c) for c in self.categories)
        for c in self.categories:
            self.means.setdefault(c, np.zeros(self.dim))
            self.counts.setdefault(c, 0)

    def copy(self) -> PrototypeRegistry:
        return PrototypeRegistry(
            self.categories, self.dim, self.mode, self.momentum,
            {c: m.copy() for c, m in self.means.items()}, dict(self.counts),
        )

    def active(self) -> list[int]:
        return [c for c in self.categories if self.counts[c] > 0]

    def blend(self, category: int, vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Weights ``(w_prior, w_new)`` such that the updated prototype after
        absorbing the rows of ``vectors`` is ``w_prior * mean + w_new @ vectors``.
        """
        n = self.counts[category]
        m = len(vectors)
        if self.mode == "cumulative":
            return np.float64(n / (n + m)), np.full(m, 1.0 / (n + m))
        # sequential EMA: later samples weigh more
        mu = self.momentum
        if n == 0:
            w_new = np.array([(1 - mu) * mu ** (m - 1 - i) for i in range(m)])
            w_new[0] = mu ** (m - 1)
            return np.float64(0.0), w_new
        w_new = np.array([(1 - mu) * mu ** (m - 1 - i) for i in range(m)])
        return np.float64(mu**m), w_new


def update_prototype(reg: PrototypeRegistry, f: RoiFeature) -> PrototypeRegistry:
    """Return a new registry with ``f`` absorbed into its category's prototype."""
    if f.category not in reg.counts:
        raise KeyError(f"unknown category {f.category}")
    if f.vector.shape != (reg.dim,):
        raise ValueError(f"feature dim {f.vector.shape} vs registry dim {reg.dim}")
    out = reg.copy()
    absorb(out, f.category, f.vector)
    return out


def absorb(reg: PrototypeRegistry, category: int, vector: np.ndarray) -> None:
    """In-place single-sample update used inside training loops."""
    n = reg.counts[category]
    mean = reg.means[category]
    if reg.mode == "cumulative" or n == 0:
        reg.means[category] = mean + (vector - mean) / (n + 1)
    else:
        reg.means[category] = reg.momentum * mean + (1.0 - reg.momentum) * vector
    reg.counts[category] = n + 1


def registry_to_json(reg: PrototypeRegistry) -> dict:
    return {
        str(c): {"mean": [float(v) for v in reg.means[c]], "count": int(reg.counts[c])}
        for c in reg.categories
    }


def registry_from_json(doc: dict, mode: str = "cumulative", momentum: float = 0.9) -> PrototypeRegistry:
    cats = sorted(int(c) for c in doc)
    if not cats:
        raise ValueError("empty registry document")
    dim = len(doc[str(cats[0])]["mean"])
    reg = PrototypeRegistry(tuple(cats), dim, mode, momentum)
    for c in cats:
        entry = doc[str(c)]
        reg.means[c] = np.asarray(entry["mean"], dtype=np.float64)
        reg.counts[c] = int(entry["count"])
    return reg


def save_registry(reg: PrototypeRegistry, path) -> None:
    with open(path, "w") as fh:
        json.dump(registry_to_json(reg), fh, sort_keys=True, indent=2)


def load_registry(path) -> PrototypeRegistry:
    with open(path) as fh:
        return registry_from_json(json.load(fh))


# --- implicit constraint ----------------------------------------------------


def _normalize(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm prototype vector")
    return v / norms[:, None], norms


def contrastive_loss(v0: np.ndarray, vk: np.ndarray, tau: float = TEMPERATURE) -> float:
    """Prototype contrastive loss for row-aligned prototype matrices.

    Row ``i`` of ``v0`` and ``vk`` are the same category in the two
    distributions; every other row of ``vk`` is a negative for row ``i``.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    u, _ = _normalize(np.asarray(v0, dtype=np.float64))
    w, _ = _normalize(np.asarray(vk, dtype=np.float64))
    s = u @ w.T / tau
    smax = s.max(axis=1, keepdims=True)
    lse = smax[:, 0] + np.log(np.exp(s - smax).sum(axis=1))
    return float(np.sum(lse - np.diag(s)))


def contrastive_loss_grad(v0: np.ndarray, vk: np.ndarray, tau: float = TEMPERATURE) -> tuple[np.ndarray, np.ndarray]:
    u, n0 = _normalize(v0)
    w, nk = _normalize(vk)
    s = u @ w.T / tau
    p = np.exp(s - s.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    g = p - np.eye(len(s))
    gu = g @ w / tau
    gw = g.T @ u / tau
    # back through v / |v|
    gv0 = (gu - u * np.sum(gu * u, axis=1, keepdims=True)) / n0[:, None]
    gvk = (gw - w * np.sum(gw * w, axis=1, keepdims=True)) / nk[:, None]
    return gv0, gvk


def implicit_loss(reg0: PrototypeRegistry, regk: PrototypeRegistry, tau: float = TEMPERATURE) -> float:
    cats0, catsk = reg0.active(), regk.active()
    if set(cats0) != set(catsk):
        raise KeyError(f"registries cover different categories: {cats0} vs {catsk}")
    if not cats0:
        raise KeyError("registries have no populated categories")
    v0 = np.stack([reg0.means[c] for c in cats0])
    vk = np.stack([regk.means[c] for c in cats0])
    return contrastive_loss(v0, vk, tau)


def prototype_loss(exp: float, imp: float) -> float:
    if not (np.isfinite(exp) and np.isfinite(imp)):
        raise ValueError("prototype loss terms must be finite")
    return exp + imp


# --- concentration diagnostics ----------------------------------------------


def avg_prototype(protos: Sequence) -> np.ndarray:
    arr = np.asarray([np.atleast_1d(np.asarray(p, dtype=np.float64)) for p in protos])
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("need a non-empty list of equal-length prototypes")
    return arr.mean(axis=0)


def concentration(protos: Sequence) -> float:
    """Mean over domains of the per-dimension mean absolute deviation from the average."""
    arr = np.asarray([np.atleast_1d(np.asarray(p, dtype=np.float64)) for p in protos])
    if arr.shape[0] == 0:
        raise ValueError("need at least one prototype")
    return float(np.mean(np.abs(arr - arr.mean(axis=0))))
