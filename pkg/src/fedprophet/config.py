"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

MODES = ("fedprophet", "joint-fat")
DATASETS = ("blobs", "images", "idx")


@dataclass
class RunConfig:
    preset: str = "mlp-4x64"
    dataset: str = "blobs"
    classes: int = 10
    dim: int = 16
    n_per_class: int = 200
    test_per_class: int = 50
    blob_sigma: float = 0.1
    idx_images: str = ""
    idx_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    clients: int = 20
    regime: str = "balanced"
    seed: int = 0
    mu: float = 1e-5
    delta: float = 0.05
    epsilon0: float = 8 / 255
    step0: float = 2 / 255
    pgd_steps: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    local_iters: int = 5
    batch_size: int = 32
    rounds: int = 60
    round_budget: str = "auto"
    patience: int = 5
    min_delta: float = 0.002
    r_min: float = 0.0
    r_min_fraction: float = 0.45
    mode: str = "fedprophet"
    apa_off: bool = False
    dma_off: bool = False
    mu_zero: bool = False
    alpha_init: float = 0.3
    val_fraction: float = 0.1
    degrade: bool = True
    standard_training: bool = False  # train with no perturbation; evaluation still attacks

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dataset not in DATASETS:
            raise ValueError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset == "idx":
            for key in ("idx_images", "idx_labels", "idx_test_images", "idx_test_labels"):
                path = getattr(self, key)
                if not path or not Path(path).exists():
                    raise FileNotFoundError(f"{key} = {path!r} does not exist")
        if self.clients < 1:
            raise ValueError("clients must be positive")
        if self.pgd_steps < 0:
            raise ValueError("pgd_steps must be non-negative")

    @property
    def mu_effective(self) -> float:
        return 0.0 if self.mu_zero else self.mu

    @property
    def eval_steps(self) -> int:
        return 2 * self.pgd_steps

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {repr(v) if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"


def _coerce(kind, raw: str):
    raw = raw.strip()
    if kind in ("bool", bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        if "/" in raw:
            num, den = raw.split("/", 1)
            return float(num) / float(den)
        return float(raw)
    return raw


def parse_config(text: str, env: bool = True) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    parser.read_string("[run]\n" + text)
    known = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for key, raw in parser["run"].items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(known[key], raw)
    if env and os.environ.get("FEDPROPHET_SEED"):
        values["seed"] = int(os.environ["FEDPROPHET_SEED"])
    return RunConfig(**values)


def load_config(path: str | Path, env: bool = True) -> RunConfig:
    return parse_config(Path(path).read_text(), env=env)
