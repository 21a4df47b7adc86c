"""Mask-based local transforms and the global/local fusion.

Every random choice of an augmentation lives in an :class:`AugmentationPlan`
so an augmented image can be replayed bit-exactly from its text record.

Stream splitting: for master seed ``s`` the global draws (alpha, radius,
spectral noise seed) come from ``default_rng([s, 0])``, the background
transform from ``default_rng([s, 1])`` and object ``k`` from
``default_rng([s, 2 + k])``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import correlate1d

from .raster import Box, ObjectSet, as_mask, as_raster, check_box, clamp, disjointify
from .spectral import global_transform

LUMA = np.array([0.299, 0.587, 0.114])
BLUR_SIZES = (23, 27, 29, 31, 33)
KINDS = ("blur", "jitter", "erase", "gray")


# --- individual transforms ------------------------------------------------


def blur_sigma(k: int) -> float:
    return 0.3 * ((k - 1) * 0.5 - 1) + 0.8


def gaussian_kernel(k: int) -> np.ndarray:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {k}")
    if k == 1:
        return np.ones(1)
    sigma = blur_sigma(k)
    offsets = np.arange(k) - (k - 1) / 2
    g = np.exp(-(offsets**2) / (2 * sigma**2))
    return g / g.sum()


def effective_kernel_size(k: int, h: int, w: int) -> int:
    """Shrink k to at most 2*min(h, w) - 1 so reflection padding stays defined."""
    return min(k, 2 * min(h, w) - 1)


def gaussian_blur(x, k: int) -> np.ndarray:
    """Separable Gaussian blur with mirror padding (edge pixel not repeated)."""
    x = as_raster(x)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {k}")
    k = effective_kernel_size(k, *x.shape[:2])
    if k == 1:
        return x.copy()
    g = gaussian_kernel(k)
    out = correlate1d(x, g, axis=0, mode="mirror")
    out = correlate1d(out, g, axis=1, mode="mirror")
    return clamp(out)


def luma(x: np.ndarray) -> np.ndarray:
    return x @ LUMA


def grayscale(x) -> np.ndarray:
    x = as_raster(x)
    return clamp(np.repeat(luma(x)[:, :, None], 3, axis=2))


def color_jitter(x, b: float, c: float, s: float, h: float) -> np.ndarray:
    """Brightness, contrast, saturation, then hue; clamped after each stage.

    ``h`` is a hue rotation in turns.  Factors must be non-negative and
    ``|h| <= 0.5``; the narrower sampling ranges are enforced by the plan.
    """
    x = as_raster(x)
    if min(b, c, s) < 0 or abs(h) > 0.5:
        raise ValueError(f"jitter factors out of range: b={b} c={c} s={s} h={h}")
    out = clamp(x * b)
    mean_gray = luma(out).mean()
    out = clamp(mean_gray + (out - mean_gray) * c)
    y = luma(out)[:, :, None]
    out = clamp(y + (out - y) * s)
    if h != 0:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + h) % 1.0
        out = clamp(hsv_to_rgb(hsv))
    return out


def random_erase(x, rect: Box, fill_seed) -> np.ndarray:
    x = as_raster(x)
    h, w, _ = x.shape
    check_box(rect, h, w)
    x0, y0, x1, y1 = rect
    out = x.copy()
    fill = np.random.default_rng(fill_seed).random((y1 - y0, x1 - x0, 3))
    out[y0:y1, x0:x1] = fill
    return out


# --- plan records ---------------------------------------------------------


@dataclass(frozen=True)
class LocalTransform:
    """One spatial transform.

    Random erasing stores its rectangle relative to the region it is applied
    to: ``area`` is the fraction of the region's box, ``aspect`` is
    width/height, and ``px, py`` in ``[0, 1)`` place it inside the box.
    """

    kind: str = "identity"
    k: int = 0
    b: float = 1.0
    c: float = 1.0
    s: float = 1.0
    h: float = 0.0
    area: float = 0.0
    aspect: float = 1.0
    px: float = 0.0
    py: float = 0.0
    fill_seed: int = 0

    def to_text(self) -> str:
        if self.kind == "blur":
            return f"blur {self.k}"
        if self.kind == "jitter":
            return f"jitter {self.b!r} {self.c!r} {self.s!r} {self.h!r}"
        if self.kind == "erase":
            return f"erase {self.area!r} {self.aspect!r} {self.px!r} {self.py!r} {self.fill_seed}"
        return self.kind

    @classmethod
    def from_text(cls, text: str) -> LocalTransform:
        kind, *args = text.split()
        if kind in ("identity", "gray"):
            return cls(kind)
        if kind == "blur":
            return cls(kind, k=int(args[0]))
        if kind == "jitter":
            b, c, s, h = map(float, args)
            return cls(kind, b=b, c=c, s=s, h=h)
        if kind == "erase":
            area, aspect, px, py = map(float, args[:4])
            return cls(kind, area=area, aspect=aspect, px=px, py=py, fill_seed=int(args[4]))
        raise ValueError(f"unknown transform kind {kind!r}")


IDENTITY = LocalTransform()


def erase_rect(t: LocalTransform, region: Box) -> Box:
    x0, y0, x1, y1 = region
    bw, bh = x1 - x0, y1 - y0
    if bw == 0 or bh == 0:
        return (x0, y0, x0, y0)
    target = t.area * bw * bh
    rw = min(bw, max(1, round(math.sqrt(target * t.aspect))))
    rh = min(bh, max(1, round(math.sqrt(target / t.aspect))))
    rx = x0 + min(bw - rw, int(t.px * (bw - rw + 1)))
    ry = y0 + min(bh - rh, int(t.py * (bh - rh + 1)))
    return (rx, ry, rx + rw, ry + rh)


def apply_transform(x: np.ndarray, t: LocalTransform, region: Box) -> np.ndarray:
    if t.kind == "identity":
        return x.copy()
    if t.kind == "blur":
        return gaussian_blur(x, t.k)
    if t.kind == "jitter":
        return color_jitter(x, t.b, t.c, t.s, t.h)
    if t.kind == "erase":
        return random_erase(x, erase_rect(t, region), t.fill_seed)
    if t.kind == "gray":
        return grayscale(x)
    raise ValueError(f"unknown transform kind {t.kind!r}")


@dataclass(frozen=True)
class AugmentationPlan:
    seed: int
    r: float
    alpha: float
    noise_seed: int
    background: LocalTransform = IDENTITY
    objects: tuple[LocalTransform, ...] = ()
    noise_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        object.__setattr__(self, "objects", tuple(self.objects))

    def to_text(self) -> str:
        lines = [
            "ufr-plan 1",
            f"seed {self.seed}",
            f"r {self.r!r}",
            f"alpha {self.alpha!r}",
            f"noise_seed {self.noise_seed}",
            f"noise_scale {self.noise_scale!r}",
            f"background {self.background.to_text()}",
            f"objects {len(self.objects)}",
        ]
        lines += [f"object {t.to_text()}" for t in self.objects]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> AugmentationPlan:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "ufr-plan 1":
            raise ValueError("not an augmentation plan record")
        fields: dict[str, str] = {}
        objects = []
        for ln in lines[1:]:
            key, _, rest = ln.strip().partition(" ")
            if key == "object":
                objects.append(LocalTransform.from_text(rest))
            else:
                fields[key] = rest
        if int(fields["objects"]) != len(objects):
            raise ValueError("object count does not match object records")
        return cls(
            seed=int(fields["seed"]),
            r=float(fields["r"]),
            alpha=float(fields["alpha"]),
            noise_seed=int(fields["noise_seed"]),
            noise_scale=float(fields["noise_scale"]),
            background=LocalTransform.from_text(fields["background"]),
            objects=tuple(objects),
        )


@dataclass(frozen=True)
class AugmentConfig:
    r_range: tuple[int, int] | None = None  # None: 1 .. min(H, W) // 8
    blur_sizes: tuple[int, ...] = BLUR_SIZES
    jitter_range: tuple[float, float] = (0.6, 1.4)
    hue_range: tuple[float, float] = (-0.1, 0.1)
    erase_area: tuple[float, float] = (0.02, 0.2)
    erase_aspect: tuple[float, float] = (0.3, 3.3)
    background_identity: bool = False
    noise_scale: float = 1.0
    kinds: tuple[str, ...] = field(default=KINDS)

    def radius_range(self, shape: tuple[int, int] | None) -> tuple[int, int]:
        if self.r_range is not None:
            return self.r_range
        if shape is None:
            raise ValueError("r_range unset and no image shape given")
        return (1, max(1, min(shape) // 8))


def _sample_transform(rng: np.random.Generator, kinds: Sequence[str], cfg: AugmentConfig) -> LocalTransform:
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "blur":
        return LocalTransform("blur", k=int(cfg.blur_sizes[int(rng.integers(len(cfg.blur_sizes)))]))
    if kind == "jitter":
        lo, hi = cfg.jitter_range
        b, c, s = (float(v) for v in rng.uniform(lo, hi, size=3))
        return LocalTransform("jitter", b=b, c=c, s=s, h=float(rng.uniform(*cfg.hue_range)))
    if kind == "erase":
        return LocalTransform(
            "erase",
            area=float(rng.uniform(*cfg.erase_area)),
            aspect=float(rng.uniform(*cfg.erase_aspect)),
            px=float(rng.random()),
            py=float(rng.random()),
            fill_seed=int(rng.integers(2**63)),
        )
    return LocalTransform(kind)


def sample_plan(
    seed: int, n_objects: int, config: AugmentConfig | None = None,
    shape: tuple[int, int] | None = None,
) -> AugmentationPlan:
    cfg = config or AugmentConfig()
    lo, hi = cfg.radius_range(shape)
    g = np.random.default_rng([seed, 0])
    alpha = float(g.random())
    r = int(g.integers(lo, hi + 1))
    noise_seed = int(g.integers(2**63))
    bg_kinds = tuple(cfg.kinds) + (("identity",) if cfg.background_identity else ())
    background = _sample_transform(np.random.default_rng([seed, 1]), bg_kinds, cfg)
    objects = tuple(
        _sample_transform(np.random.default_rng([seed, 2 + k]), cfg.kinds, cfg)
        for k in range(n_objects)
    )
    return AugmentationPlan(seed, r, alpha, noise_seed, background, objects, cfg.noise_scale)


# --- composition ----------------------------------------------------------


def local_transform(x, objs: ObjectSet, plan: AugmentationPlan) -> np.ndarray:
    """Background and per-object transforms, each re-masked to its own region."""
    x = as_raster(x)
    if len(plan.objects) != len(objs):
        raise ValueError(f"plan has {len(plan.objects)} object transforms, scene has {len(objs)}")
    h, w, _ = x.shape
    bg = ~objs.union((h, w))
    out = apply_transform(x * bg[:, :, None], plan.background, (0, 0, w, h)) * bg[:, :, None]
    for m, box, t in zip(objs.masks, objs.boxes, plan.objects):
        m3 = as_mask(m)[:, :, None]
        out = out + apply_transform(x * m3, t, box) * m3
    return clamp(out)


def glt(x, objs: ObjectSet, plan: AugmentationPlan) -> np.ndarray:
    x = as_raster(x)
    objs = disjointify(objs)
    gt = global_transform(x, plan.r, plan.noise_seed, plan.noise_scale)
    lt = local_transform(x, objs, plan)
    return clamp(plan.alpha * gt + (1.0 - plan.alpha) * lt)


def with_alpha(plan: AugmentationPlan, alpha: float) -> AugmentationPlan:
    return replace(plan, alpha=alpha)
