"""Run configuration: a flat ``key = value`` text file with documented defaults.

Blank lines and ``#`` comments are ignored.  Keys are the field names of
:class:`RunConfig`; command-line overrides are applied after the file.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .gradcore import LossConfig
from .localaug import AugmentConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    size: int = 64               # scene height and width
    n_scenes: int = 8            # training scenes
    n_eval: int = 8              # held-out scenes for the final metrics
    eval_domains: int = 5        # domain 0 is the original image, the rest are fixed GLT views
    batch_size: int = 2          # scenes per step, each as original + augmented view
    steps: int = 300
    lr: float = 0.01
    momentum: float = 0.9
    lambda1: float = 0.1
    lambda2: float = 0.1
    t: float = 0.7
    tau: float = 0.2
    attention_mode: str = "dice_soft"
    proto_mode: str = "cumulative"
    proto_momentum: float = 0.9
    channels: int = 8
    hidden: int = 8
    r_min: int = 1
    r_max: int = 0               # 0: size // 8
    noise_scale: float = 1.0
    background_identity: bool = False

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambda1, self.lambda2, self.t, self.tau, self.attention_mode)

    def augment_config(self) -> AugmentConfig:
        r_max = self.r_max or max(1, self.size // 8)
        return AugmentConfig(
            r_range=(self.r_min, max(self.r_min, r_max)),
            noise_scale=self.noise_scale,
            background_identity=self.background_identity,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(kind: type, text: str):
    if kind is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text.strip())


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def apply_overrides(cfg: RunConfig, pairs: Iterable[tuple[str, str]]) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    updates = {}
    for key, value in pairs:
        if key not in fields:
            raise KeyError(f"unknown config key {key!r}")
        updates[key] = _coerce(_TYPES[fields[key].type], value)
    return dataclasses.replace(cfg, **updates)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        pairs.append((key.strip(), value))
    return apply_overrides(base or RunConfig(), pairs)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
