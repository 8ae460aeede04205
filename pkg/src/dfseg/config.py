"""Run configuration: one JSON document with a section per pipeline stage.

Every field is optional. Unknown keys are rejected with a message naming the
full dotted path, so a typo such as ``degan.lamda_d`` cannot silently fall
back to a default.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .ablation import LAMBDA_PAIRS, lambda_grid, mixing_grid
from .errors import InvalidConfigError
from .shapesdata import PROXY_DROPPED, PROXY_FREQUENCY, TRUE_FREQUENCY, DatasetConfig
from .training import DeGANConfig, MixedBatchSpec, TrainPolicy, derive_seed

# "true" distills on the labeled training images (labels unused): a baseline, not data-free
DISTILL_SOURCES = ("proxy", "generator", "mixed", "true")


@dataclass
class DataSection:
    num_classes: int = 6
    image_size: list = field(default_factory=lambda: [32, 32])
    n_train: int = 1000
    n_val: int = 200
    n_proxy: int = 1000
    true_frequency: list = field(default_factory=lambda: list(TRUE_FREQUENCY))
    proxy_frequency: list = field(default_factory=lambda: list(PROXY_FREQUENCY))
    proxy_dropped: list = field(default_factory=lambda: list(PROXY_DROPPED))
    color_jitter: float = 0.12
    noise_std: float = 0.04


@dataclass
class TeacherSection:
    width: int = 32
    dropout: float = 0.5
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_every_n_epochs: int = 10
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    betas: list = field(default_factory=lambda: [0.9, 0.999])


@dataclass
class GanSection:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 2e-4
    betas: list = field(default_factory=lambda: [0.5, 0.999])
    d_z: int = 64
    generator_width: int = 16
    discriminator_width: int = 16


@dataclass
class DeganSection:
    lambda_e: float = 0.0
    lambda_d: float = 10.0
    diversity_variant: str = "weighted"


@dataclass
class DistillSection:
    student_width: int = 8
    dropout: float = 0.5
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_every_n_epochs: int = 10
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    source: str = "mixed"
    alpha: typing.Optional[int] = None
    beta: typing.Optional[int] = None
    temperature: float = 1.0
    generator_stage: str = "degan"
    frozen_dump: bool = False


@dataclass
class EvalSection:
    split: str = "val"
    report_samples: int = 256


@dataclass
class AblationSection:
    lambda_grid: list = field(default_factory=lambda: [list(c) for c in lambda_grid(LAMBDA_PAIRS)])
    mix_grid: list = field(default_factory=lambda: [list(c) for c in mixing_grid(8)])
    n_seeds: int = 3
    jobs: int = 1


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    gan: GanSection = field(default_factory=GanSection)
    degan: DeganSection = field(default_factory=DeganSection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    output_dir: str = "runs/default"
    global_seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- derived objects -------------------------------------------------

    def seed(self, *tags) -> int:
        return derive_seed(self.global_seed, *tags)

    def dataset_config(self, split: str) -> DatasetConfig:
        d = self.data
        common = dict(num_classes=d.num_classes, image_size=tuple(d.image_size),
                      color_jitter=d.color_jitter, noise_std=d.noise_std)
        if split == "proxy":
            return DatasetConfig(n_images=d.n_proxy, class_frequency=tuple(d.proxy_frequency),
                                 dropped_classes=tuple(d.proxy_dropped), seed=self.seed("data", "proxy"), **common)
        n = {"train": d.n_train, "val": d.n_val}[split]
        return DatasetConfig(n_images=n, class_frequency=tuple(d.true_frequency), seed=self.seed("data", split),
                             **common)

    def teacher_policy(self) -> TrainPolicy:
        t = self.teacher
        return TrainPolicy(epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
                           lr_decay_factor=t.lr_decay_factor, lr_decay_every_n_epochs=t.lr_decay_every_n_epochs,
                           weight_decay=t.weight_decay, optimizer=t.optimizer, betas=tuple(t.betas),
                           seed=self.seed("teacher"))

    def gan_policy(self, stage: str = "gan") -> TrainPolicy:
        g = self.gan
        return TrainPolicy(epochs=g.epochs, batch_size=g.batch_size, learning_rate=g.learning_rate,
                           lr_decay_factor=1.0, lr_decay_every_n_epochs=max(g.epochs, 1), weight_decay=0.0,
                           optimizer="adam", betas=tuple(g.betas), seed=self.seed(stage))

    def degan_config(self) -> DeGANConfig:
        d = self.degan
        return DeGANConfig(lambda_e=d.lambda_e, lambda_d=d.lambda_d, diversity_variant=d.diversity_variant,
                           d_z=self.gan.d_z)

    def distill_policy(self) -> TrainPolicy:
        t = self.distill
        return TrainPolicy(epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
                           lr_decay_factor=t.lr_decay_factor, lr_decay_every_n_epochs=t.lr_decay_every_n_epochs,
                           weight_decay=t.weight_decay, optimizer=t.optimizer, betas=tuple(t.betas),
                           seed=self.seed("distill"))

    def mix_spec(self) -> MixedBatchSpec:
        n = self.distill.batch_size
        d = self.distill
        if d.alpha is None and d.beta is None:
            return MixedBatchSpec.even(n)
        alpha = d.alpha if d.alpha is not None else n - d.beta
        beta = d.beta if d.beta is not None else n - alpha
        return MixedBatchSpec(alpha, beta, n)

    def ablation_seeds(self) -> list[int]:
        return [self.global_seed + i for i in range(self.ablation.n_seeds)]


def _check_type(value, hint, path: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        if value is None:
            return value
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    elif hint is list:
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise InvalidConfigError(f"{path}: expected {getattr(hint, '__name__', hint)}, got {type(value).__name__}")
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise InvalidConfigError(f"unknown key {(path + '.' if path else '') + key!r}")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, sub)
        else:
            kwargs[key] = _check_type(value, hint, sub)
    return cls(**kwargs)


def parse_config(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def load_config(path) -> tuple[RunConfig, str]:
    """Return the parsed config and the verbatim document text."""
    if path is None:
        return parse_config({}), "{}\n"
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"{path}: malformed JSON: {exc}") from None
    return parse_config(data), text


def validate(cfg: RunConfig) -> None:
    """Build every derived object once so bad values fail before any work starts."""
    for split in ("train", "val", "proxy"):
        cfg.dataset_config(split)
    cfg.teacher_policy()
    cfg.gan_policy()
    cfg.degan_config()
    cfg.distill_policy()
    if cfg.distill.source not in DISTILL_SOURCES:
        raise InvalidConfigError(f"distill.source must be one of {DISTILL_SOURCES}, got {cfg.distill.source!r}")
    if cfg.eval.split not in ("train", "val"):
        raise InvalidConfigError(f"eval.split must be 'train' or 'val', got {cfg.eval.split!r}")
    if cfg.distill.generator_stage not in ("gan", "degan"):
        raise InvalidConfigError("distill.generator_stage must be 'gan' or 'degan'")
    try:
        cfg.mix_spec()
    except ValueError as exc:
        raise InvalidConfigError(f"distill.alpha/beta: {exc}") from None
    if cfg.teacher.width <= cfg.distill.student_width:
        raise InvalidConfigError("distill.student_width must be smaller than teacher.width")
    for i, cell in enumerate(cfg.ablation.lambda_grid):
        if not (isinstance(cell, list) and len(cell) == 3 and cell[2] in ("plain", "weighted")):
            raise InvalidConfigError(f"ablation.lambda_grid[{i}] must be [lambda_e, lambda_d, 'plain'|'weighted']")
    for i, cell in enumerate(cfg.ablation.mix_grid):
        if not (isinstance(cell, list) and len(cell) == 2):
            raise InvalidConfigError(f"ablation.mix_grid[{i}] must be [alpha, beta]")
        if sum(cell) != cfg.distill.batch_size or min(cell) < 0:
            raise InvalidConfigError(f"ablation.mix_grid[{i}] must be non-negative and sum to distill.batch_size")
    if cfg.ablation.n_seeds < 1 or cfg.ablation.jobs < 1:
        raise InvalidConfigError("ablation.n_seeds and ablation.jobs must be >= 1")
    if cfg.eval.report_samples < 1:
        raise InvalidConfigError("eval.report_samples must be >= 1")
