"""Training, gradient checking, diagnostics and augmentation pipelines."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attention as att
from . import prototypes as proto
from .config import RunConfig
from .gradcore import (
    GradientError, LossConfig, Pair, ToyModel, absorb_batch, forward, gradcheck, total_loss,
    train_step,
)
from .localaug import AugmentConfig, AugmentationPlan, glt, sample_plan
from .raster import ObjectSet
from .scenes import CATEGORIES, SyntheticScene, gen_scenes

log = logging.getLogger(__name__)

EVAL_STREAM = 0xE7A1
STEP_STREAM = 0x57E9
MODEL_STREAM = 0x30DE


class DivergenceError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


def dumps_report(report: dict) -> str:
    """Stable serialization: sorted keys, shortest round-trip float repr."""
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def augment_scene(image: np.ndarray, objects: ObjectSet, seed: int,
                  cfg: AugmentConfig) -> tuple[np.ndarray, AugmentationPlan]:
    plan = sample_plan(seed, len(objects), cfg, image.shape[:2])
    return glt(image, objects, plan), plan


# --- evaluation ------------------------------------------------------------


def domain_views(scenes: Sequence[SyntheticScene], cfg: RunConfig) -> list[list[np.ndarray]]:
    """``views[d][i]``: scene ``i`` in evaluation domain ``d`` (0 = original)."""
    aug = cfg.augment_config()
    views = [[s.image for s in scenes]]
    for d in range(1, cfg.eval_domains):
        views.append([
            augment_scene(s.image, s.objects, _seed(cfg.seed, EVAL_STREAM, d, i), aug)[0]
            for i, s in enumerate(scenes)
        ])
    return views


def _seed(*parts: int) -> int:
    return int(np.random.default_rng(list(parts)).integers(2**31))


def domain_prototypes(model: ToyModel, scenes: Sequence[SyntheticScene],
                      views: list[list[np.ndarray]]) -> tuple[list[dict[int, np.ndarray]], list[dict]]:
    """Per-domain mean ROI feature per category, plus the first-stage outputs."""
    protos, outputs = [], []
    for images in views:
        acc: dict[int, list[np.ndarray]] = {}
        outs = []
        for s, img in zip(scenes, images):
            fr = forward(model, img, s.objects.boxes)
            outs.append(fr)
            for r, c in zip(fr.rois, s.objects.categories):
                acc.setdefault(c, []).append(r.value)
        protos.append({c: np.mean(v, axis=0) for c, v in acc.items()})
        outputs.append(outs)
    return protos, outputs


def evaluate(model: ToyModel, scenes: Sequence[SyntheticScene], views: list[list[np.ndarray]]) -> dict:
    protos, outputs = domain_prototypes(model, scenes, views)
    d_c = {}
    for c in range(len(CATEGORIES)):
        per_domain = [p[c] for p in protos if c in p]
        if len(per_domain) == len(protos):
            d_c[str(c)] = proto.concentration(per_domain)
    dice_vals = [
        att.attention_loss(f0.features.value, fk.features.value, "dice_hard")
        for d in range(1, len(outputs))
        for f0, fk in zip(outputs[0], outputs[d])
    ]
    correct = total = 0
    for outs in outputs:
        for s, fr in zip(scenes, outs):
            for p, c in zip(fr.probs, s.objects.categories):
                correct += int(np.argmax(p.value) == c)
                total += 1
    return {
        "d_c": d_c,
        "mean_d_c": float(np.mean(list(d_c.values()))) if d_c else None,
        "dice_hard": float(np.mean(dice_vals)) if dice_vals else 0.0,
        "accuracy": correct / total if total else None,
    }


# --- training --------------------------------------------------------------


@dataclass
class TrainResult:
    model: ToyModel
    report: dict
    reg0: proto.PrototypeRegistry
    regk: proto.PrototypeRegistry
    history: list[dict] = field(default_factory=list)


def init_model(cfg: RunConfig) -> ToyModel:
    return ToyModel.init(_seed(cfg.seed, MODEL_STREAM), cfg.channels, len(CATEGORIES), cfg.hidden)


def train(cfg: RunConfig) -> TrainResult:
    """Paired original/augmented training with shared parameters."""
    scenes = gen_scenes(cfg.seed, cfg.n_scenes, cfg.size)
    eval_scenes = gen_scenes(cfg.seed + 1_000_003, cfg.n_eval, cfg.size)
    views = domain_views(eval_scenes, cfg)
    aug = cfg.augment_config()
    loss_cfg = cfg.loss_config()
    model = init_model(cfg)
    reg0 = proto.PrototypeRegistry(tuple(range(len(CATEGORIES))), cfg.channels, cfg.proto_mode, cfg.proto_momentum)
    regk = reg0.copy()
    velocity = None
    rng = np.random.default_rng([cfg.seed, STEP_STREAM])
    history = []
    for step in range(cfg.steps):
        picks = rng.integers(len(scenes), size=cfg.batch_size)
        seeds = rng.integers(2**31, size=cfg.batch_size)
        batch = []
        for i, sd in zip(picks, seeds):
            s = scenes[int(i)]
            batch.append(Pair(s.image, augment_scene(s.image, s.objects, int(sd), aug)[0], s.objects))
        result = total_loss(model, batch, loss_cfg, reg0, regk)
        comps = result.components()
        if not np.isfinite(comps["total"]):
            raise DivergenceError(step, "non-finite loss")
        try:
            grad = result.gradient()
            model, velocity = train_step(model, grad, cfg.lr, cfg.momentum, velocity)
        except GradientError as exc:
            raise DivergenceError(step, str(exc)) from exc
        absorb_batch(result, batch, reg0, regk)
        history.append({"step": step, **comps, "n_confident": sum(len(s) for s in result.selected)})
        if step % 50 == 0:
            log.info("step %d total %.5f", step, comps["total"])
    report = {
        "command": "train",
        "config": cfg.to_dict(),
        "steps": history,
        "final": evaluate(model, eval_scenes, views),
        "gradcheck_max_rel_err": None,
    }
    return TrainResult(model, report, reg0, regk, history)


# --- gradient check --------------------------------------------------------


def gradcheck_pair(seed: int, size: int = 8) -> Pair:
    """A small two-object, two-category scene and a perturbed view of it."""
    rng = np.random.default_rng([seed, 0x6C])
    image = rng.random((size, size, 3))
    half = size // 2
    masks = [np.zeros((size, size), bool), np.zeros((size, size), bool)]
    masks[0][:, :half] = True
    masks[1][:, half:] = True
    objects = ObjectSet(masks, [(0, 0, half, size), (half, 0, size, size)], [0, 1])
    augmented = np.clip(image + 0.2 * rng.standard_normal(image.shape), 0, 1)
    return Pair(image, augmented, objects)


GRADCHECK_TERMS = {
    "L_sup": dict(lambda1=0.0, lambda2=0.0),
    "L_att_dice_soft": dict(attention_mode="dice_soft"),
    "L_att_mse": dict(attention_mode="mse"),
    "L_exp": dict(use_imp=False),
    "L_imp": dict(use_exp=False),
    "total": dict(),
}


def _term_value(result, term: str) -> float:
    if term.startswith("L_att"):
        return float(result.att.value)
    if term == "L_exp":
        return float(result.exp.value)
    if term == "L_imp":
        return float(result.imp.value)
    if term == "L_sup":
        return float(result.sup.value)
    return float(result.total.value)


def run_gradcheck(cfg: RunConfig, size: int = 8, eps: float = 1e-4) -> dict:
    """Check each loss term and the full objective against central differences.

    The confidence threshold is set to 0 so that every proposal reaches the
    prototype terms; at a freshly initialised model none would pass 0.7.
    """
    pair = gradcheck_pair(cfg.seed, size)
    model = ToyModel.init(_seed(cfg.seed, MODEL_STREAM), cfg.channels, 2, cfg.hidden)
    reg_cats = (0, 1)
    base = LossConfig(cfg.lambda1, cfg.lambda2, 0.0, cfg.tau, cfg.attention_mode)
    out = {}
    for term, overrides in GRADCHECK_TERMS.items():
        lcfg = replace(base, **overrides)
        reg0 = proto.PrototypeRegistry(reg_cats, cfg.channels, cfg.proto_mode, cfg.proto_momentum)
        regk = reg0.copy()

        def objective(theta, term=term, lcfg=lcfg):
            res = total_loss(model.with_flat(theta), [pair], lcfg, reg0, regk)
            sig = res.tape.kink_signature() + repr(res.selected).encode()
            return _term_value(res, term), sig

        res = total_loss(model, [pair], lcfg, reg0, regk)
        target = {"L_sup": res.sup, "L_exp": res.exp, "L_imp": res.imp, "total": res.total}.get(term, res.att)
        grad = res.gradient(target)
        check = gradcheck(objective, grad, model.flat(), eps)
        out[term] = {
            "value": _term_value(res, term),
            "max_rel_err": check.max_rel_err,
            "checked": check.checked,
            "skipped_kinks": check.skipped_kinks,
        }
    return {
        "command": "gradcheck",
        "config": cfg.to_dict(),
        "terms": out,
        "gradcheck_max_rel_err": max(v["max_rel_err"] for v in out.values()),
    }


# --- diagnostics -------------------------------------------------------------


def feature_l1(model_a: ToyModel, model_b: ToyModel, images: Sequence[np.ndarray]) -> float:
    """Mean absolute difference between two models' backbone features."""
    diffs = [
        np.mean(np.abs(forward(model_a, x, []).features.value - forward(model_b, x, []).features.value))
        for x in images
    ]
    return float(np.mean(diffs))


def registry_concentration(regs: Sequence[proto.PrototypeRegistry]) -> dict[str, float]:
    """Concentration per category across registries treated as domains."""
    cats = set(regs[0].active())
    for r in regs[1:]:
        cats &= set(r.active())
    return {str(c): proto.concentration([r.means[c] for r in regs]) for c in sorted(cats)}


def diagnose(cfg: RunConfig, model: ToyModel | None = None, other: ToyModel | None = None,
             registries: Sequence[proto.PrototypeRegistry] = ()) -> dict:
    report: dict = {"command": "diagnose", "config": cfg.to_dict()}
    if model is not None:
        scenes = gen_scenes(cfg.seed + 1_000_003, cfg.n_eval, cfg.size)
        views = domain_views(scenes, cfg)
        protos, _ = domain_prototypes(model, scenes, views)
        report["avg_prototypes"] = {
            str(c): [float(v) for v in proto.avg_prototype([p[c] for p in protos])]
            for c in range(len(CATEGORIES)) if all(c in p for p in protos)
        }
        report["final"] = evaluate(model, scenes, views)
        if other is not None:
            report["feature_l1"] = feature_l1(model, other, [img for dom in views for img in dom])
    if registries:
        report["registry_d_c"] = registry_concentration(registries)
    return report


def write_report(report: dict, path) -> None:
    Path(path).write_text(dumps_report(report))
