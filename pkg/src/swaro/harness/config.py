"""Flat JSON run configuration."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from importlib import resources

from ..adversarial import AttackConfig
from ..contrastive import LossConfig
from ..data import AugmentationSpec

# Reference radii for 3072-dimensional CIFAR inputs; rescaled to the input width.
REFERENCE_UNSEEN_L2 = (0.25, 0.5)
REFERENCE_UNSEEN_L1 = (7.84, 12.0)
CIFAR_DIM = 3072


class ConfigError(ValueError):
    pass


def parse_number(value) -> float:
    """Accept plain numbers and fraction strings such as ``"8/255"``."""
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"not a number: {value!r}") from None


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    # data
    dataset: str = "blobs"
    n_samples: int = 600
    n_classes: int = 2
    dim: int = 16
    spread: float = 1.0
    blob_box: float | None = None
    csv_path: str | None = None
    csv_width: int | None = None
    csv_lower: float = 0.0
    csv_upper: float = 255.0
    test_fraction: float = 0.3
    # augmentation
    noise_std: float = 0.05
    scale_lo: float = 0.9
    scale_hi: float = 1.1
    mask_prob: float = 0.1
    shift: int = 0
    # encoder
    backbone: tuple[int, ...] = (64, 32)
    head: tuple[int, ...] = (64, 128)
    activation: str = "relu"
    # loss
    temperature: float = 0.5
    loss_convention: str = "eq1"
    # train-time attack
    adversarial: bool = True
    norm: str = "linf"
    epsilon: float = 8 / 255
    step_size: float = 1 / 255
    attack_steps: int = 7
    random_start: bool = True
    # SwARo
    clusters: int | None = None
    p: float = 0.75
    warmup_fraction: float = 0.05
    cluster_every: int = 1
    kmeans_iters: int = 50
    # optimisation
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    # seeds
    seed_data: int = 0
    seed_init: int = 0
    seed_augment: int = 0
    seed_attack: int = 0
    seed_perm: int = 0
    seed_mix: int = 0
    seed_cluster: int = 0
    # evaluation
    probe_epochs: int = 50
    probe_lr: float = 0.01
    robust_probe_lr: float = 0.02
    probe_batch: int = 64
    eval_steps: int = 10
    eval_linf: tuple[float, ...] = (8 / 255, 16 / 255)
    eval_l2: tuple[float, ...] | None = None
    eval_l1: tuple[float, ...] | None = None
    # output
    output_dir: str | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"p must lie in [0, 1], got {self.p}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.dataset not in ("blobs", "csv"):
            raise ConfigError(f"unknown dataset kind {self.dataset!r}")
        if self.dataset == "csv" and (not self.csv_path or not self.csv_width):
            raise ConfigError("csv datasets need csv_path and csv_width")
        if len(self.head) != 2:
            raise ConfigError("head must list exactly two widths")
        if not self.backbone:
            raise ConfigError("backbone needs at least one layer")
        if self.clusters is not None and self.clusters < 1:
            raise ConfigError("clusters must be >= 1")
        if self.cluster_every < 1:
            raise ConfigError("cluster_every must be >= 1")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")
        # validate nested configs eagerly so bad files fail at load time
        self.loss_config()
        self.attack_config()
        self.augmentation()

    # derived pieces -------------------------------------------------
    @property
    def input_dim(self) -> int:
        return self.dim if self.dataset == "blobs" else int(self.csv_width)

    @property
    def num_clusters(self) -> int:
        return self.clusters if self.clusters is not None else 2 * self.n_classes

    @property
    def warmup_epochs(self) -> int:
        return int(math.ceil(self.warmup_fraction * self.epochs - 1e-9))

    def loss_config(self) -> LossConfig:
        return LossConfig(self.temperature, self.loss_convention)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(norm=self.norm, epsilon=self.epsilon, step_size=self.step_size,
                            steps=self.attack_steps, random_start=self.random_start)

    def augmentation(self) -> AugmentationSpec:
        return AugmentationSpec(self.noise_std, self.scale_lo, self.scale_hi, self.mask_prob,
                                self.shift)

    def eval_budgets(self) -> list[tuple[str, float]]:
        scale = self.input_dim / CIFAR_DIM
        l2 = self.eval_l2 if self.eval_l2 is not None else tuple(
            r * math.sqrt(scale) for r in REFERENCE_UNSEEN_L2)
        l1 = self.eval_l1 if self.eval_l1 is not None else tuple(
            r * scale for r in REFERENCE_UNSEEN_L1)
        return ([("linf", e) for e in self.eval_linf] + [("l2", e) for e in l2]
                + [("l1", e) for e in l1])

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, **{f.name: seed for f in fields(self) if f.name.startswith("seed_")})

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_NUMERIC_TUPLES = {"eval_linf", "eval_l2", "eval_l1"}
_FLOATS = {f.name for f in fields(RunConfig) if f.type in ("float", "float | None")}


def config_from_dict(doc: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kw = {}
    for key, value in doc.items():
        if key in _NUMERIC_TUPLES and value is not None:
            value = tuple(parse_number(v) for v in value)
        elif key in ("backbone", "head"):
            value = tuple(int(v) for v in value)
        elif key in _FLOATS and value is not None:
            value = parse_number(value)
        kw[key] = value
    try:
        return RunConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | os.PathLike) -> RunConfig:
    """Read a config file, or a shipped preset written as ``preset:NAME``."""
    spec = os.fspath(path)
    if spec.startswith("preset:"):
        return load_preset(spec.split(":", 1)[1])
    if not os.path.isfile(spec):
        raise FileNotFoundError(f"config file not found: {spec}")
    with open(spec) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{spec}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{spec}: top level must be a JSON object")
    return config_from_dict(doc)


def preset_names() -> list[str]:
    root = resources.files("swaro.presets")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> RunConfig:
    try:
        text = resources.files("swaro.presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}") from None
    return config_from_dict(json.loads(text))
