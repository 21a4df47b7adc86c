"""A small reverse-mode tape, the toy detector and its training objective.

The tape records every operation as it is evaluated; :meth:`Tape.backward`
walks the records in reverse and accumulates vector-Jacobian products into
each node's ``grad``.  Only the operation set the objective needs exists:
convolution, ReLU, sigmoid, elementwise product, ROI mean-pooling, linear
layers, softmax, and the loss terms themselves.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import attention as att
from . import prototypes as proto
from .raster import Box, ObjectSet, check_box

PROB_FLOOR = 1e-12


class GradientError(FloatingPointError):
    pass


# --- tape ------------------------------------------------------------------


class Var:
    __slots__ = ("value", "grad", "parents", "vjp", "op")

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.op = op


def const(value) -> np.ndarray:
    """Values that are not tape nodes are treated as constants by every op."""
    return value.value if isinstance(value, Var) else np.asarray(value, dtype=np.float64)


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []
        self.relu_masks: list[np.ndarray] = []

    def leaf(self, value) -> Var:
        v = Var(np.asarray(value, dtype=np.float64))
        self.nodes.append(v)
        return v

    def push(self, op: str, value, parents: Sequence, vjp: Callable) -> Var:
        v = Var(value, tuple(parents), vjp, op)
        self.nodes.append(v)
        return v

    def backward(self, out: Var) -> None:
        if np.ndim(out.value) != 0:
            raise GradientError("backward needs a scalar output")
        if not np.isfinite(out.value):
            raise GradientError("non-finite loss")
        for n in self.nodes:
            n.grad = None
        out.grad = np.float64(1.0)
        # nodes were appended in evaluation order, which is topological
        for n in reversed(self.nodes):
            if n.grad is None or n.vjp is None:
                continue
            for p, g in zip(n.parents, n.vjp(n.grad)):
                if g is None or not isinstance(p, Var):
                    continue
                p.grad = g if p.grad is None else p.grad + g

    def kink_signature(self) -> bytes:
        """Packed ReLU activation pattern; differs whenever an input crossed a kink."""
        return b"".join(np.packbits(m).tobytes() for m in self.relu_masks)

    # --- elementwise and reductions ---------------------------------------

    def add(self, a, b) -> Var:
        return self.push("add", const(a) + const(b), (a, b), lambda g: (g, g))

    def scale(self, a, c: float) -> Var:
        return self.push("scale", c * const(a), (a,), lambda g: (c * g,))

    def mul(self, a, b) -> Var:
        va, vb = const(a), const(b)
        return self.push("mul", va * vb, (a, b), lambda g: (g * vb, g * va))

    def relu(self, a) -> Var:
        va = const(a)
        mask = va > 0
        self.relu_masks.append(mask)
        return self.push("relu", np.where(mask, va, 0.0), (a,), lambda g: (g * mask,))

    def sigmoid(self, a) -> Var:
        s = att.sigmoid(const(a))
        return self.push("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))

    def mean(self, items: Sequence) -> Var:
        n = len(items)
        vals = [const(i) for i in items]
        return self.push("mean", sum(vals) / n, tuple(items), lambda g: tuple(g / n for _ in items))

    def stack(self, rows: Sequence) -> Var:
        value = np.stack([const(r) for r in rows])
        return self.push("stack", value, tuple(rows), lambda g: tuple(g[i] for i in range(len(rows))))

    def combine(self, base: np.ndarray, rows: Sequence, weights: np.ndarray) -> Var:
        """``base + sum_i weights[i] * rows[i]`` with ``base`` constant."""
        value = base + sum(w * const(r) for w, r in zip(weights, rows))
        return self.push("combine", value, tuple(rows), lambda g: tuple(w * g for w in weights))

    # --- layers -----------------------------------------------------------

    def conv2d(self, x, w, b) -> Var:
        """3x3 stride-1 convolution with reflect padding on a (C, H, W) input."""
        vx, vw, vb = const(x), const(w), const(b)
        cin, h, wd = vx.shape
        cout = vw.shape[0]
        idx = _conv_gather(h, wd)
        patches = vx.reshape(cin, h * wd)[:, idx].reshape(cin * 9, h * wd)
        wm = vw.reshape(cout, cin * 9)
        out = (wm @ patches + vb[:, None]).reshape(cout, h, wd)

        def vjp(g):
            gm = g.reshape(cout, h * wd)
            gw = (gm @ patches.T).reshape(vw.shape)
            gb = gm.sum(axis=1)
            gp = (wm.T @ gm).reshape(cin, 9 * h * wd)
            flat = idx.ravel()
            gx = np.stack([np.bincount(flat, weights=gp[c], minlength=h * wd) for c in range(cin)])
            return gx.reshape(cin, h, wd), gw, gb

        return self.push("conv2d", out, (x, w, b), vjp)

    def roi_mean(self, fmap, box: Box) -> Var:
        vf = const(fmap)
        x0, y0, x1, y1 = box
        area = (x1 - x0) * (y1 - y0)
        if area == 0:
            raise ValueError(f"empty ROI box {box}")
        value = vf[:, y0:y1, x0:x1].mean(axis=(1, 2))

        def vjp(g):
            out = np.zeros_like(vf)
            out[:, y0:y1, x0:x1] = g[:, None, None] / area
            return (out,)

        return self.push("roi_mean", value, (fmap,), vjp)

    def linear(self, v, w, b) -> Var:
        vv, vw, vb = const(v), const(w), const(b)
        return self.push(
            "linear", vw @ vv + vb, (v, w, b),
            lambda g: (vw.T @ g, np.outer(g, vv), g),
        )

    def softmax(self, z) -> Var:
        vz = const(z)
        e = np.exp(vz - vz.max())
        p = e / e.sum()
        return self.push("softmax", p, (z,), lambda g: (p * (g - np.dot(g, p)),))

    # --- losses -----------------------------------------------------------

    def nll(self, p, label: int) -> Var:
        """Cross-entropy of a probability vector against an integer label."""
        vp = const(p)
        q = max(vp[label], PROB_FLOOR)

        def vjp(g):
            out = np.zeros_like(vp)
            if vp[label] > PROB_FLOOR:
                out[label] = -g / q
            return (out,)

        return self.push("nll", np.float64(-math.log(q)), (p,), vjp)

    def soft_dice(self, a1, a2, squared: bool = True) -> Var:
        v1, v2 = const(a1), const(a2)
        value = np.float64(att.soft_dice(v1, v2, squared=squared))
        g1, g2 = att.soft_dice_grad(v1, v2, squared=squared)
        return self.push("soft_dice", value, (a1, a2), lambda g: (g * g1, g * g2))

    def mse(self, a1, a2) -> Var:
        v1, v2 = const(a1), const(a2)
        d = (v1 - v2) * (2.0 / v1.size)
        return self.push("mse", np.float64(att.mse(v1, v2)), (a1, a2), lambda g: (g * d, -g * d))

    def kl(self, p0, pk) -> Var:
        v0, vk = const(p0), const(pk)
        value = np.float64(proto.explicit_loss(v0, vk))
        g0, gk = proto.explicit_loss_grad(v0, vk)
        return self.push("kl", value, (p0, pk), lambda g: (g * g0, g * gk))

    def contrastive(self, v0, vk, tau: float) -> Var:
        a, b = const(v0), const(vk)
        value = np.float64(proto.contrastive_loss(a, b, tau))
        ga, gb = proto.contrastive_loss_grad(a, b, tau)
        return self.push("contrastive", value, (v0, vk), lambda g: (g * ga, g * gb))


@lru_cache(maxsize=32)
def _conv_gather(h: int, w: int) -> np.ndarray:
    """(9, h*w) flat source indices of each 3x3 tap under reflect padding."""
    ih = np.pad(np.arange(h), 1, mode="reflect")
    iw = np.pad(np.arange(w), 1, mode="reflect")
    taps = [
        (ih[di : di + h][:, None] * w + iw[dj : dj + w][None, :]).ravel()
        for di in range(3)
        for dj in range(3)
    ]
    out = np.stack(taps)
    out.setflags(write=False)
    return out


# --- toy model -------------------------------------------------------------

PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "head_w", "head_b")


@dataclass
class ToyModel:
    """conv3x3(3->hidden) -> ReLU -> conv3x3(hidden->channels) backbone and a
    pooled linear/softmax head over ``n_cat`` categories."""

    params: dict[str, np.ndarray]
    activation: str = "relu"

    @classmethod
    def init(cls, seed: int, channels: int = 8, n_cat: int = 3, hidden: int = 8,
             activation: str = "relu") -> ToyModel:
        rng = np.random.default_rng(seed)

        def uniform(shape, fan_in, fan_out):
            a = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-a, a, size=shape)

        params = {
            "conv1_w": uniform((hidden, 3, 3, 3), 27, hidden * 9),
            "conv1_b": np.zeros(hidden),
            "conv2_w": uniform((channels, hidden, 3, 3), hidden * 9, channels * 9),
            "conv2_b": np.zeros(channels),
            "head_w": uniform((n_cat, channels), channels, n_cat),
            "head_b": np.zeros(n_cat),
        }
        return cls(params, activation)

    @property
    def channels(self) -> int:
        return self.params["conv2_w"].shape[0]

    @property
    def n_cat(self) -> int:
        return self.params["head_w"].shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_ORDER])

    def with_flat(self, theta: np.ndarray) -> ToyModel:
        out, i = {}, 0
        for k in PARAM_ORDER:
            p = self.params[k]
            out[k] = np.asarray(theta[i : i + p.size], dtype=np.float64).reshape(p.shape)
            i += p.size
        return ToyModel(out, self.activation)

    def copy(self) -> ToyModel:
        return ToyModel({k: v.copy() for k, v in self.params.items()}, self.activation)


@dataclass
class ForwardResult:
    tape: Tape
    leaves: dict[str, Var]
    features: Var
    attention: Var
    rois: list[Var]
    probs: list[Var]

    def roi_features(self, categories: Sequence[int]) -> list[proto.RoiFeature]:
        return [
            proto.RoiFeature(r.value, c, float(np.max(p.value)))
            for r, p, c in zip(self.rois, self.probs, categories)
        ]

    @property
    def confidences(self) -> list[float]:
        return [float(np.max(p.value)) for p in self.probs]


INPUT_CENTER = 0.5


def to_chw(x: np.ndarray) -> np.ndarray:
    """(H, W, 3) image in [0, 1] -> centered (3, H, W) network input."""
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).transpose(2, 0, 1)) - INPUT_CENTER


def forward(model: ToyModel, x: np.ndarray, boxes: Sequence[Box], tape: Tape | None = None,
            leaves: dict[str, Var] | None = None) -> ForwardResult:
    """Run backbone, attention gate and head on an (H, W, 3) image.

    Pass ``leaves`` to share parameter nodes between several forward passes
    on one tape (e.g. the original and augmented streams).
    """
    tape = tape or Tape()
    if leaves is None:
        leaves = {k: tape.leaf(v) for k, v in model.params.items()}
    img = to_chw(x)
    _, h, w = img.shape
    for b in boxes:
        check_box(b, h, w)
    hid = tape.conv2d(img, leaves["conv1_w"], leaves["conv1_b"])
    if model.activation == "relu":
        hid = tape.relu(hid)
    feats = tape.conv2d(hid, leaves["conv2_w"], leaves["conv2_b"])
    attn = tape.sigmoid(feats)
    gated = tape.mul(feats, attn)
    rois, probs = [], []
    for b in boxes:
        v = tape.roi_mean(gated, b)
        rois.append(v)
        probs.append(tape.softmax(tape.linear(v, leaves["head_w"], leaves["head_b"])))
    return ForwardResult(tape, leaves, feats, attn, rois, probs)


def features_of(model: ToyModel, x: np.ndarray) -> np.ndarray:
    return forward(model, x, []).features.value


# --- objective -------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    t: float = proto.CONFIDENCE_THRESHOLD
    tau: float = proto.TEMPERATURE
    attention_mode: str = "dice_soft"
    use_exp: bool = True
    use_imp: bool = True


@dataclass
class Pair:
    """An original image, its augmented view, and the shared object annotations."""

    original: np.ndarray
    augmented: np.ndarray
    objects: ObjectSet


@dataclass
class LossResult:
    tape: Tape
    leaves: dict[str, Var]
    total: Var
    sup: Var
    att: Var
    exp: Var
    imp: Var
    streams: list[tuple[ForwardResult, ForwardResult]]
    selected: list[list[int]]

    def components(self) -> dict[str, float]:
        return {
            "L_sup": float(self.sup.value),
            "L_att": float(self.att.value),
            "L_exp": float(self.exp.value),
            "L_imp": float(self.imp.value),
            "total": float(self.total.value),
        }

    def gradient(self, target: Var | None = None) -> np.ndarray:
        """Flat parameter gradient of ``target`` (default: the total loss)."""
        self.tape.backward(self.total if target is None else target)
        return np.concatenate([
            np.zeros_like(self.leaves[k].value).ravel() if self.leaves[k].grad is None
            else np.asarray(self.leaves[k].grad).ravel()
            for k in PARAM_ORDER
        ])


def _zero(tape: Tape) -> Var:
    return tape.push("zero", np.float64(0.0), (), None)


def total_loss(model: ToyModel, batch: Sequence[Pair], cfg: LossConfig = LossConfig(),
               reg0: proto.PrototypeRegistry | None = None,
               regk: proto.PrototypeRegistry | None = None) -> LossResult:
    """Supervised cross-entropy on both streams plus the weighted invariance terms.

    Proposals are the annotated boxes; the confident subset is chosen on the
    original image and indexes both streams.  Registries are constants: each
    category's prototype is the registry mean blended with this batch's
    confident features, and only the batch part carries gradient.
    """
    if not batch:
        raise ValueError("empty batch")
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in model.params.items()}
    streams, sup_terms, att_terms, selected = [], [], [], []
    for pair in batch:
        boxes = pair.objects.boxes
        f0 = forward(model, pair.original, boxes, tape, leaves)
        fk = forward(model, pair.augmented, boxes, tape, leaves)
        streams.append((f0, fk))
        for fr in (f0, fk):
            sup_terms.extend(tape.nll(p, c) for p, c in zip(fr.probs, pair.objects.categories))
        if cfg.attention_mode == "dice_soft":
            att_terms.append(tape.soft_dice(f0.attention, fk.attention, squared=True))
        elif cfg.attention_mode == "mse":
            att_terms.append(tape.mse(f0.attention, fk.attention))
        elif cfg.attention_mode == "dice_hard":
            # metric path: contributes its value but no gradient
            value = att.attention_loss(f0.features.value, fk.features.value, "dice_hard")
            att_terms.append(tape.push("dice_hard", np.float64(value), (), None))
        else:
            raise ValueError(f"unknown attention mode {cfg.attention_mode!r}")
        selected.append(proto.confident_indices(f0.confidences, cfg.t))

    sup = tape.mean(sup_terms) if sup_terms else _zero(tape)
    att_loss = tape.mean(att_terms)

    p0_rows, pk_rows = [], []
    by_cat0: dict[int, list[Var]] = {}
    by_catk: dict[int, list[Var]] = {}
    for pair, (f0, fk), sel in zip(batch, streams, selected):
        for i in sel:
            c = pair.objects.categories[i]
            p0_rows.append(f0.probs[i])
            pk_rows.append(fk.probs[i])
            by_cat0.setdefault(c, []).append(f0.rois[i])
            by_catk.setdefault(c, []).append(fk.rois[i])

    if cfg.use_exp and p0_rows:
        exp = tape.kl(tape.stack(p0_rows), tape.stack(pk_rows))
    else:
        exp = _zero(tape)

    imp = _zero(tape)
    if cfg.use_imp:
        v0_rows, vk_rows = _prototype_rows(tape, model.channels, by_cat0, by_catk, reg0, regk)
        if len(v0_rows) >= 2:
            imp = tape.contrastive(tape.stack(v0_rows), tape.stack(vk_rows), cfg.tau)

    prot = tape.add(exp, imp)
    total = tape.add(tape.add(sup, tape.scale(att_loss, cfg.lambda1)), tape.scale(prot, cfg.lambda2))
    return LossResult(tape, leaves, total, sup, att_loss, exp, imp, streams, selected)


def _prototype_rows(tape, dim, by_cat0, by_catk, reg0, regk):
    cats = set(by_cat0)
    if reg0 is not None and regk is not None:
        cats |= set(reg0.active()) & set(regk.active())
    rows0, rowsk = [], []
    for c in sorted(cats):
        for rows, by_cat, reg in ((rows0, by_cat0, reg0), (rowsk, by_catk, regk)):
            feats = by_cat.get(c, [])
            if reg is None or c not in reg.counts:
                reg = proto.PrototypeRegistry((c,), dim)
            w_prior, w_new = reg.blend(c, feats)
            rows.append(tape.combine(w_prior * reg.means[c], feats, w_new))
    return rows0, rowsk


def absorb_batch(result: LossResult, batch: Sequence[Pair], reg0: proto.PrototypeRegistry,
                 regk: proto.PrototypeRegistry) -> None:
    """Fold this step's confident ROI features into both registries."""
    for pair, (f0, fk), sel in zip(batch, result.streams, result.selected):
        for i in sel:
            c = pair.objects.categories[i]
            proto.absorb(reg0, c, f0.rois[i].value)
            proto.absorb(regk, c, fk.rois[i].value)


# --- verification ------------------------------------------------------------


def finite_diff(fn: Callable[[np.ndarray], float], params: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.array(params, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + eps
        fp = fn(theta)
        theta[i] = orig - eps
        fm = fn(theta)
        theta[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradientError(f"non-finite loss at coordinate {i}")
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|) where either exceeds ``floor``, else 0."""
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric) / np.where(scale > 0, scale, 1.0)
    return np.where(scale > floor, err, 0.0)


@dataclass
class GradCheck:
    max_rel_err: float
    checked: int
    skipped_kinks: int
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def gradcheck(loss_fn: Callable[[np.ndarray], tuple[float, bytes]],
              analytic: np.ndarray, params: np.ndarray, eps: float = 1e-4) -> GradCheck:
    """Compare ``analytic`` against central differences of ``loss_fn``.

    ``loss_fn`` returns ``(loss, kink_signature)``; coordinates whose
    perturbation changes the signature straddle a ReLU kink, where the
    derivative is one-sided, and are skipped.
    """
    theta = np.array(params, dtype=np.float64)
    _, sig0 = loss_fn(theta)
    numeric = np.empty_like(theta)
    kinked = np.zeros(theta.size, dtype=bool)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + eps
        fp, sp = loss_fn(theta)
        theta[i] = orig - eps
        fm, sm = loss_fn(theta)
        theta[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradientError(f"non-finite loss at coordinate {i}")
        numeric[i] = (fp - fm) / (2 * eps)
        kinked[i] = sp != sig0 or sm != sig0
    err = relative_errors(analytic, numeric)
    err[kinked] = 0.0
    considered = (np.maximum(np.abs(analytic), np.abs(numeric)) > 1e-6) & ~kinked
    return GradCheck(float(err.max(initial=0.0)), int(considered.sum()), int(kinked.sum()), analytic, numeric)


# --- optimizer -------------------------------------------------------------


def train_step(model: ToyModel, grad: np.ndarray, lr: float, momentum: float,
               velocity: np.ndarray | None = None) -> tuple[ToyModel, np.ndarray]:
    """Classical momentum: ``v <- mu*v - lr*g``, ``theta <- theta + v``."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not np.all(np.isfinite(grad)):
        raise GradientError("non-finite gradient; step aborted")
    theta = model.flat()
    if velocity is None:
        velocity = np.zeros_like(theta)
    velocity = momentum * velocity - lr * grad
    return model.with_flat(theta + velocity), velocity


# --- checkpoints -------------------------------------------------------------

CKPT_MAGIC = "ufr-checkpoint 1"


def save_checkpoint(model: ToyModel, path) -> None:
    """Text shape manifest terminated by ``end``, then little-endian float32 data."""
    header = [CKPT_MAGIC, f"activation {model.activation}"]
    header += [f"{k} " + " ".join(str(d) for d in model.params[k].shape) for k in PARAM_ORDER]
    header.append("end")
    blob = model.flat().astype("<f4").tobytes()
    Path(path).write_bytes(("\n".join(header) + "\n").encode() + blob)


def load_checkpoint(path) -> ToyModel:
    buf = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = buf.find(marker)
    if not buf.startswith(CKPT_MAGIC.encode()) or cut < 0:
        raise ValueError(f"{path}: not a checkpoint file")
    lines = buf[:cut].decode().splitlines()[1:]
    data = np.frombuffer(buf[cut + len(marker):], dtype="<f4").astype(np.float64)
    activation = "relu"
    params, i = {}, 0
    for line in lines:
        key, *dims = line.split()
        if key == "activation":
            activation = dims[0]
            continue
        shape = tuple(int(d) for d in dims)
        n = int(np.prod(shape))
        if i + n > data.size:
            raise ValueError(f"{path}: truncated parameter data")
        params[key] = data[i : i + n].reshape(shape)
        i += n
    if i != data.size or set(params) != set(PARAM_ORDER):
        raise ValueError(f"{path}: parameter manifest does not match data")
    return ToyModel(params, activation)
