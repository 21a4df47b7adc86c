"""Image, mask and box containers plus their file formats.

Rasters are plain ``float64`` arrays of shape ``(H, W, 3)`` with values in
``[0, 1]``; masks are ``bool`` arrays of shape ``(H, W)``.  Images are stored
as binary PPM (P6, maxval 255), masks as binary PGM (P5, 0/255), and boxes as
a text file with one ``category x0 y0 x1 y1`` line per object.  Boxes are
half-open: columns ``x0 <= x < x1`` and rows ``y0 <= y < y1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

Box = tuple[int, int, int, int]


class RasterError(ValueError):
    """Base class for raster I/O and shape errors."""


class MalformedHeaderError(RasterError):
    pass


class TruncatedPayloadError(RasterError):
    pass


class UnsupportedMaxvalError(RasterError):
    pass


class DimensionMismatchError(RasterError):
    pass


def as_raster(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise DimensionMismatchError(f"expected (H, W, 3) raster, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise RasterError("raster contains non-finite values")
    return x


def clamp(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise DimensionMismatchError(f"expected (H, W) mask, got {m.shape}")
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise RasterError("mask values must be 0 or 1")
        m = m.astype(bool)
    return m


@dataclass
class ObjectSet:
    """Per-object masks, boxes and category labels, index-aligned."""

    masks: list[np.ndarray] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)
    categories: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.masks) == len(self.boxes) == len(self.categories)):
            raise ValueError("masks, boxes and categories must have equal length")
        self.masks = [as_mask(m) for m in self.masks]
        self.boxes = [tuple(int(v) for v in b) for b in self.boxes]
        self.categories = [int(c) for c in self.categories]
        shapes = {m.shape for m in self.masks}
        if len(shapes) > 1:
            raise DimensionMismatchError(f"masks have differing shapes {shapes}")
        if self.masks:
            h, w = self.masks[0].shape
            for b in self.boxes:
                check_box(b, h, w)

    def __len__(self) -> int:
        return len(self.masks)

    def union(self, shape: tuple[int, int]) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        for m in self.masks:
            out |= m
        return out


def check_box(box: Sequence[int], h: int, w: int) -> None:
    x0, y0, x1, y1 = box
    if not (0 <= x0 <= x1 <= w and 0 <= y0 <= y1 <= h):
        raise ValueError(f"box {tuple(box)} outside {w}x{h} image")


def box_of_mask(m: np.ndarray) -> Box:
    """Tight half-open bounding box of a non-empty mask."""
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        return (0, 0, 0, 0)
    return (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


# --- netpbm ---------------------------------------------------------------


def _read_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Parse a netpbm header; returns (width, height, maxval, payload offset)."""
    if buf[:2] != magic:
        raise MalformedHeaderError(f"expected magic {magic!r}, got {buf[:2]!r}")
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        # whitespace and comments between tokens
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                nl = buf.find(b"\n", pos)
                pos = len(buf) if nl < 0 else nl + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise MalformedHeaderError("missing or non-numeric header field")
        tokens.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise MalformedHeaderError("header must end with a single whitespace byte")
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxvalError(f"only maxval 255 is supported, got {maxval}")
    return width, height, maxval, pos + 1


def _payload(buf: bytes, offset: int, n: int) -> np.ndarray:
    data = np.frombuffer(buf, dtype=np.uint8, count=-1, offset=offset)
    if data.size < n:
        raise TruncatedPayloadError(f"expected {n} payload bytes, found {data.size}")
    return data[:n]


def quantize(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8-bit."""
    return np.floor(clamp(np.asarray(x, dtype=np.float64)) * 255.0 + 0.5).astype(np.uint8)


def load_image(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, _, off = _read_header(buf, b"P6")
    data = _payload(buf, off, w * h * 3)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def encode_image(x: np.ndarray) -> bytes:
    x = as_raster(x)
    h, w, _ = x.shape
    return b"P6\n%d %d\n255\n" % (w, h) + quantize(x).tobytes()


def save_image(x: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_image(x))


def load_mask(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, _, off = _read_header(buf, b"P5")
    data = _payload(buf, off, w * h)
    return data.reshape(h, w) >= 128


def encode_gray(g: np.ndarray) -> bytes:
    g = np.asarray(g, dtype=np.float64)
    h, w = g.shape
    return b"P5\n%d %d\n255\n" % (w, h) + quantize(g).tobytes()


def save_mask(m: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_gray(as_mask(m).astype(np.float64)))


def save_gray(g: np.ndarray, path) -> None:
    """Write a [0, 1] grayscale map (e.g. an attention heat image) as PGM."""
    Path(path).write_bytes(encode_gray(g))


def load_boxes(path) -> tuple[list[int], list[Box]]:
    categories, boxes = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'category x0 y0 x1 y1'")
        c, x0, y0, x1, y1 = (int(p) for p in parts)
        categories.append(c)
        boxes.append((x0, y0, x1, y1))
    return categories, boxes


def save_boxes(categories: Sequence[int], boxes: Sequence[Box], path) -> None:
    lines = [f"{c} {b[0]} {b[1]} {b[2]} {b[3]}" for c, b in zip(categories, boxes)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_objects(box_path, mask_paths: Sequence) -> ObjectSet:
    categories, boxes = load_boxes(box_path)
    masks = [load_mask(p) for p in mask_paths]
    if len(masks) != len(boxes):
        raise ValueError(f"{len(boxes)} boxes but {len(masks)} masks")
    return ObjectSet(masks, boxes, categories)


# --- mask algebra ---------------------------------------------------------


def _check_dims(x: np.ndarray, m: np.ndarray) -> None:
    if x.shape[:2] != m.shape:
        raise DimensionMismatchError(f"raster {x.shape[:2]} vs mask {m.shape}")


def extract_object(x, m) -> np.ndarray:
    x, m = as_raster(x), as_mask(m)
    _check_dims(x, m)
    return x * m[:, :, None]


def background_of(x, objs: ObjectSet) -> np.ndarray:
    """The image with every object pixel zeroed."""
    x = as_raster(x)
    if len(objs) == 0:
        return x.copy()
    _check_dims(x, objs.masks[0])
    return x * ~objs.union(x.shape[:2])[:, :, None]


def disjointify(objs: ObjectSet) -> ObjectSet:
    """Resolve overlaps so that lower-indexed masks win contested pixels."""
    claimed = None
    masks = []
    for m in objs.masks:
        if claimed is None:
            claimed = np.zeros_like(m)
        masks.append(m & ~claimed)
        claimed = claimed | m
    return ObjectSet(masks, list(objs.boxes), list(objs.categories))


def is_disjoint(objs: ObjectSet) -> bool:
    if len(objs) == 0:
        return True
    total = np.sum([m.astype(np.int64) for m in objs.masks], axis=0)
    return bool(np.all(total <= 1))
