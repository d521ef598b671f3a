"""TOML experiment configuration: validation, defaults, conversion to runtime
objects, and the resolved snapshot written next to every run."""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path
from typing import Annotated, Literal, Optional

import tomli
import tomli_w
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError

from .adversary import AttackConfig
from .datasets import (Dataset, gen_gaussian_blobs, gen_rings, gen_two_moons, load_idx,
                       sklearn_digits, train_test_split)
from .nn import LrSchedule, ModelSpec, OptimizerState
from .training import SCHEMES, TABLE_ROWS, Ablations, TrainConfig


class ConfigError(ValueError):
    """All problems found in a config, reported together."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n" + "\n".join(f"  {e}" for e in self.errors))


def _rational(v):
    if isinstance(v, str):
        try:
            return float(Fraction(v.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"not a number or rational string: {v!r}") from exc
    return v


Real = Annotated[float, BeforeValidator(_rational)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Section):
    kind: Literal["two_moons", "blobs", "rings", "digits", "idx"] = "two_moons"
    n: int = Field(1000, ge=2)
    noise: Real = Field(0.1, ge=0)
    ambient_dim: int = Field(2, ge=2)
    k: int = Field(3, ge=2)
    spacing: Real = 10.0
    sigma: Real = Field(1.0, ge=0)
    radii: list[Real] = [1.0, 2.0]
    images: Optional[str] = None
    labels: Optional[str] = None
    test_fraction: Real = Field(0.3, gt=0, lt=1)
    data_seed: Optional[int] = None


class ModelSection(_Section):
    architecture: Literal["mlp", "small_conv", "mini_preact_resnet"] = "mlp"
    widths: list[int] = [64, 64]
    channels: list[int] = []
    kernel_sizes: list[int] = []
    blocks: int = Field(2, ge=1)


class AttackSection(_Section):
    name: str = "PGD20"
    kind: Literal["pgd", "fgsm", "random_search"] = "pgd"
    epsilon: Real = Field(8 / 255, ge=0)
    step_size: Optional[Real] = Field(None, gt=0)
    steps: int = Field(20, ge=1)
    restarts: int = Field(1, ge=1)
    init: Literal["uniform", "zero"] = "uniform"
    queries: int = Field(500, ge=0)

    def build(self, default_step_fraction: float) -> AttackConfig:
        step = self.step_size
        if step is None:
            step = self.epsilon * default_step_fraction if self.epsilon > 0 else 1e-3
        return AttackConfig(epsilon=self.epsilon, step_size=step, steps=self.steps,
                            restarts=self.restarts, init=self.init, name=self.name,
                            kind=self.kind, queries=self.queries)


class TrainAttackSection(AttackSection):
    name: str = "train"
    steps: int = Field(5, ge=1)


class AblationSection(_Section):
    frozen_lambda: bool = False
    shared_delta: bool = False
    geometric_labels: bool = False
    optimize_ratio: bool = True


class OptimizerSection(_Section):
    kind: Literal["yogi", "sgd_momentum"] = "yogi"
    learning_rate: Real = Field(0.003, gt=0)
    momentum: Real = 0.9
    beta1: Real = 0.9
    beta2: Real = 0.999
    eps: Real = 1e-3
    weight_decay: Real = Field(5e-4, ge=0)


class ScheduleSection(_Section):
    milestones: list[Real] = [0.7, 0.9]
    factor: Real = Field(0.1, gt=0, le=1)


class TrainSection(_Section):
    scheme: Optional[Literal[SCHEMES]] = None
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(128, ge=1)
    alpha: Real = Field(0.5, gt=0)
    kappa: Real = Field(0.65, ge=0, lt=1)
    eta_gamma: Real = Field(0.1, gt=0)
    fixed_lambda: Optional[Real] = Field(None, ge=0, le=1)
    mix_clamp: bool = False
    augment: bool = True
    attack: TrainAttackSection = TrainAttackSection()
    ablations: AblationSection = AblationSection()
    optimizer: OptimizerSection = OptimizerSection()
    schedule: ScheduleSection = ScheduleSection()


def _default_attacks() -> list[AttackSection]:
    return [AttackSection(name="PGD20", steps=20), AttackSection(name="PGD100", steps=100)]


class EvalSection(_Section):
    attacks: list[AttackSection] = Field(default_factory=_default_attacks)


class AblateSection(_Section):
    rows: list[Literal[tuple(TABLE_ROWS)]] = list(TABLE_ROWS)


class PlotSection(_Section):
    grid_resolution: int = Field(101, ge=2)


class ExperimentConfig(_Section):
    out: str = "runs"
    seeds: list[int] = [0]
    dataset: DatasetSection = DatasetSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    ablate: AblateSection = AblateSection()
    plots: PlotSection = PlotSection()

    # -- runtime objects ---------------------------------------------------
    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(
            scheme=t.scheme or "attack", epochs=t.epochs, batch_size=t.batch_size,
            attack=t.attack.build(0.5), ablations=Ablations(**t.ablations.model_dump()),
            alpha=t.alpha, kappa=t.kappa, eta_gamma=t.eta_gamma,
            optimizer=OptimizerState(**t.optimizer.model_dump()),
            schedule=LrSchedule(base_lr=t.optimizer.learning_rate,
                                milestones=tuple(t.schedule.milestones), factor=t.schedule.factor),
            seed=seed, fixed_lambda=t.fixed_lambda, mix_clamp=t.mix_clamp, augment=t.augment)

    def eval_attacks(self) -> list[AttackConfig]:
        return [a.build(0.25) for a in self.eval.attacks]

    def model_spec(self, input_shape, class_count: int, seed: int) -> ModelSpec:
        m = self.model
        return ModelSpec(m.architecture, tuple(input_shape), class_count, widths=tuple(m.widths),
                         channels=tuple(m.channels), kernel_sizes=tuple(m.kernel_sizes),
                         blocks=m.blocks, init_seed=seed)

    def load_dataset(self, seed: int) -> Dataset:
        d = self.dataset
        s = seed if d.data_seed is None else d.data_seed
        if d.kind == "two_moons":
            return gen_two_moons(d.n, d.noise, s, ambient_dim=d.ambient_dim)
        if d.kind == "blobs":
            return gen_gaussian_blobs(d.k, d.n, d.spacing, d.sigma, s)
        if d.kind == "rings":
            return gen_rings(d.n, tuple(d.radii), d.sigma, s)
        if d.kind == "digits":
            return sklearn_digits()
        return load_idx(d.images, d.labels, name="idx")

    def split(self, seed: int):
        return train_test_split(self.load_dataset(seed), self.dataset.test_fraction, seed)

    def resolved(self) -> dict:
        """Every effective setting, with derived step sizes filled in."""
        out = self.model_dump(exclude_none=True)
        out["train"]["attack"]["step_size"] = float(self.train_config(0).attack.step_size)
        for a, built in zip(out["eval"]["attacks"], self.eval_attacks()):
            a["step_size"] = float(built.step_size)
        return out


def _format_error(err: dict) -> str:
    loc = ".".join(str(p) for p in err["loc"]) or "<root>"
    return f"{loc}: {err['msg']}"


def validate_config(raw: dict, require_scheme: bool = False) -> ExperimentConfig:
    """Validate a parsed TOML document, listing every violation at once."""
    errors: list[str] = []
    cfg = None
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        errors.extend(_format_error(e) for e in exc.errors())
    if require_scheme and "scheme" not in (raw.get("train") or {}):
        errors.append("train.scheme: required key missing")
    if cfg is not None:
        d = cfg.dataset
        if d.kind == "idx" and (d.images is None or d.labels is None):
            errors.append("dataset: kind 'idx' needs both 'images' and 'labels'")
        ms = cfg.train.schedule.milestones
        if any(not 0 < m <= 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            errors.append("train.schedule.milestones: must be strictly increasing in (0, 1]")
        if not cfg.seeds:
            errors.append("seeds: at least one seed is required")
        names = [a.name for a in cfg.eval.attacks]
        if len(set(names)) != len(names) or "pristine" in names:
            errors.append("eval.attacks: names must be unique and not 'pristine'")
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path, require_scheme: bool = False) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    cfg = validate_config(raw, require_scheme)
    # dataset files are relative to the config file
    base = Path(path).resolve().parent
    for key in ("images", "labels"):
        value = getattr(cfg.dataset, key)
        if value is not None and not Path(value).is_absolute():
            setattr(cfg.dataset, key, str(base / value))
    return cfg


def write_resolved(cfg: ExperimentConfig, path) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(cfg.resolved(), fh)
