"""Synthetic shape scenes with exact object masks.

Each scene holds one to four non-overlapping filled circles, squares and
upward triangles in random colors over a two-tone striped background.  The
shape kind is the category; color and background are nuisance factors.
A pixel belongs to a shape when its center ``(col + 0.5, row + 0.5)`` lies
inside the shape's analytic region.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .raster import ObjectSet, box_of_mask

CATEGORIES = ("circle", "square", "triangle")


@dataclass(frozen=True)
class Shape:
    kind: str
    cx: float
    cy: float
    radius: float
    color: tuple[float, float, float]

    @property
    def category(self) -> int:
        return CATEGORIES.index(self.kind)


def shape_mask(shape: Shape, h: int, w: int) -> np.ndarray:
    py = np.arange(h)[:, None] + 0.5
    px = np.arange(w)[None, :] + 0.5
    dx, dy, r = px - shape.cx, py - shape.cy, shape.radius
    if shape.kind == "circle":
        return dx**2 + dy**2 <= r**2
    if shape.kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape.kind == "triangle":
        # apex at (cx, cy - r), base from (cx - r, cy + r) to (cx + r, cy + r)
        return (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


@dataclass
class SyntheticScene:
    image: np.ndarray
    objects: ObjectSet
    shapes: list[Shape]


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    c1, c2 = rng.random(3), rng.random(3)
    theta = rng.uniform(0, math.pi)
    period = rng.uniform(4.0, 12.0)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    phase = (xx * math.cos(theta) + yy * math.sin(theta)) / period
    stripe = np.sin(2 * math.pi * phase) >= 0
    return np.where(stripe[:, :, None], c1, c2)


def _boxes_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def make_scene(rng: np.random.Generator, size: int = 64, max_objects: int = 4) -> SyntheticScene:
    h = w = size
    image = _background(rng, h, w)
    n_target = int(rng.integers(1, max_objects + 1))
    r_lo, r_hi = max(1.5, size / 10), max(2.0, size / 5)
    shapes: list[Shape] = []
    masks, boxes = [], []
    attempts = 0
    while len(shapes) < n_target and attempts < 200:
        attempts += 1
        r = float(rng.uniform(r_lo, r_hi))
        cx = float(rng.uniform(r, w - r))
        cy = float(rng.uniform(r, h - r))
        kind = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        color = tuple(float(c) for c in rng.random(3))
        s = Shape(kind, cx, cy, r, color)
        m = shape_mask(s, h, w)
        if not m.any():
            continue
        box = box_of_mask(m)
        # a one-pixel gap keeps masks and boxes disjoint
        padded = (box[0] - 1, box[1] - 1, box[2] + 1, box[3] + 1)
        if any(_boxes_overlap(padded, b) for b in boxes):
            continue
        shapes.append(s)
        masks.append(m)
        boxes.append(box)
    for s, m in zip(shapes, masks):
        image[m] = s.color
    return SyntheticScene(image, ObjectSet(masks, boxes, [s.category for s in shapes]), shapes)


def gen_scenes(seed: int, n: int, size: int = 64) -> list[SyntheticScene]:
    if n < 1:
        raise ValueError("need at least one scene")
    rng = np.random.default_rng([seed, 0x5CE5E])
    return [make_scene(rng, size) for _ in range(n)]
