"""Outer training loops: standard, mixup, PGD adversarial training, the two
mixup/attack baselines, and adversarially optimized mixup with its ablations.

Every scheme produces one (inputs, soft targets) batch per step; the
parameter update itself is shared so that degenerate settings of different
schemes give bit-identical runs.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .adversary import AttackConfig, evaluate_robust, pgd_delta
from .datasets import Dataset, Preprocessor
from .mixup import (MixState, PairBatch, PerturbationState, geometric_label_ratio, mix_labels,
                    mix_points, pair_permutation, ratio_step, sample_lambda)
from .nn import LrSchedule, Model, OptimizerState, optimizer_step
from .objectives import kl_loss, one_hot, predict
from .tensor import Tensor, as_tensor, backward, get_tape

SCHEMES = ("standard", "mixup", "attack", "mix_then_attack", "attack_then_mix", "adv_mixup")


class TrainingDivergence(RuntimeError):
    pass


class ConstraintViolation(AssertionError):
    pass


@dataclass(frozen=True)
class Ablations:
    """Switches for adversarially optimized mixup.

    The ratio is optimized only when ``optimize_ratio`` is on and
    ``frozen_lambda`` is off; with ``optimize_ratio`` off the ratio is a plain
    Beta draw.
    """

    frozen_lambda: bool = False
    shared_delta: bool = False
    geometric_labels: bool = False
    optimize_ratio: bool = True


def default_train_attack(epsilon=8 / 255) -> AttackConfig:
    return AttackConfig(epsilon=epsilon, step_size=epsilon / 2 if epsilon else 1e-3, steps=5,
                        name="train")


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "attack"
    epochs: int = 30
    batch_size: int = 128
    attack: AttackConfig = field(default_factory=default_train_attack)
    ablations: Ablations = field(default_factory=Ablations)
    alpha: float = 0.5
    kappa: float = 0.65
    eta_gamma: float = 0.1
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 0
    fixed_lambda: float | None = None
    mix_clamp: bool = False
    augment: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.fixed_lambda is not None and not 0 <= self.fixed_lambda <= 1:
            raise ValueError("fixed_lambda must lie in [0, 1]")


# Ablation-report rows, in report order.
TABLE_ROWS = {
    "Attack": ("attack", None),
    "Mix-then-Attack": ("mix_then_attack", None),
    "Attack-then-Mix": ("attack_then_mix", None),
    "Ours, Frozen λ, Shared δ": ("adv_mixup", Ablations(frozen_lambda=True, shared_delta=True,
                                                      optimize_ratio=False)),
    "Ours, Frozen λ": ("adv_mixup", Ablations(frozen_lambda=True, optimize_ratio=False)),
    "Ours, Shared δ": ("adv_mixup", Ablations(shared_delta=True)),
    "Ours": ("adv_mixup", Ablations()),
}


def row_config(cfg: TrainConfig, row: str) -> TrainConfig:
    scheme, ablations = TABLE_ROWS[row]
    geometric = cfg.ablations.geometric_labels
    if ablations is None:
        return replace(cfg, scheme=scheme)
    return replace(cfg, scheme=scheme, ablations=replace(ablations, geometric_labels=geometric))


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    lr: float


@dataclass
class RunMetrics:
    scheme: str
    seed: int
    epochs: list[EpochMetrics] = field(default_factory=list)
    pristine_accuracy: float | None = None
    robust: dict = field(default_factory=dict)
    constraint_checks: int = 0
    wall_clock: float = 0.0

    def jsonl_lines(self) -> list[str]:
        """Epoch records then a summary record.  Wall-clock time is left out so
        that identical runs produce identical bytes."""
        lines = [json.dumps({"type": "epoch", **asdict(e)}, sort_keys=True) for e in self.epochs]
        summary = {"type": "summary", "scheme": self.scheme, "seed": self.seed,
                   "pristine_accuracy": self.pristine_accuracy, "robust": self.robust,
                   "constraint_checks": self.constraint_checks}
        lines.append(json.dumps(summary, sort_keys=True))
        return lines

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.jsonl_lines()) + "\n")


class _Streams:
    """Independent random streams so that schemes consuming different amounts
    of attack randomness still see identical batches and mixing ratios."""

    def __init__(self, seed: int):
        order, attack, mix, aug, partner = np.random.SeedSequence(seed).spawn(5)
        self.order = np.random.default_rng(order)
        self.attack = np.random.default_rng(attack)
        self.partner = np.random.default_rng(partner)
        self.mix = np.random.default_rng(mix)
        self.augment = np.random.default_rng(aug)


class _Step:
    def __init__(self, model: Model, cfg: TrainConfig, attack: AttackConfig, value_range, streams):
        self.model = model
        self.cfg = cfg
        self.attack = attack
        self.value_range = value_range
        self.streams = streams
        self.checks = 0

    def check(self, delta: np.ndarray) -> None:
        if delta.size and np.any(np.abs(delta) > self.attack.epsilon):
            raise ConstraintViolation(
                f"perturbation {np.max(np.abs(delta))!r} exceeds epsilon {self.attack.epsilon!r}")
        self.checks += 1

    def pgd(self, x, target) -> np.ndarray:
        a = self.attack
        delta = pgd_delta(self.model, x, target, a.epsilon, a.step_size, a.steps,
                          self.streams.attack, a.init, self.value_range)
        self.check(delta)
        return delta

    def pairs(self, x, y) -> tuple[PairBatch, np.ndarray]:
        pair = pair_permutation(x, y, self.streams.mix)
        if self.cfg.fixed_lambda is not None:
            lam = np.full(len(x), float(self.cfg.fixed_lambda))
        else:
            lam = sample_lambda(self.cfg.alpha, len(x), self.streams.mix)
        return pair, lam

    def in_range(self, x_m: np.ndarray) -> np.ndarray:
        """x + delta and convex combinations can round one ulp past the range."""
        return x_m if self.value_range is None else np.clip(x_m, *self.value_range)

    def mix_clamp_range(self):
        return self.value_range if self.cfg.mix_clamp else None


def _standard(s: _Step, x, y):
    return x, y


def _mixup(s: _Step, x, y):
    pair, lam = s.pairs(x, y)
    return s.in_range(mix_points(pair.x_i, pair.x_j, lam).values), mix_labels(pair, lam)


def _attack(s: _Step, x, y):
    return s.in_range(x + s.pgd(x, y)), y


def _mix_then_attack(s: _Step, x, y):
    pair, lam = s.pairs(x, y)
    x_m = s.in_range(mix_points(pair.x_i, pair.x_j, lam).values)
    y_m = mix_labels(pair, lam)
    return s.in_range(x_m + s.pgd(x_m, y_m)), y_m


def _attack_then_mix(s: _Step, x, y):
    x_adv = s.in_range(x + s.pgd(x, y))
    pair, lam = s.pairs(x_adv, y)
    return s.in_range(mix_points(pair.x_i, pair.x_j, lam).values), mix_labels(pair, lam)


def adv_mixup_batch(s: _Step, x, y, trace: list | None = None):
    """Jointly optimize both endpoint perturbations (and the ratio) of each pair.

    ``trace`` collects the inner-loop loss (before each step and at the end).
    """
    cfg, ab, a = s.cfg, s.cfg.ablations, s.attack
    pair = pair_permutation(x, y, s.streams.mix)
    m = len(x)
    if cfg.fixed_lambda is not None:
        mix = MixState.fixed(np.full(m, float(cfg.fixed_lambda)))
    elif ab.optimize_ratio:
        mix = MixState.from_ratio(cfg.alpha, cfg.kappa, m, s.streams.mix, frozen=ab.frozen_lambda)
    else:
        mix = MixState.fixed(sample_lambda(cfg.alpha, m, s.streams.mix))
    pert = PerturbationState.init(x.shape, a.epsilon, pair.perm, s.streams.attack,
                                  "shared" if ab.shared_delta else "independent", a.init,
                                  pair.x_i, pair.x_j, s.value_range, s.streams.partner)
    clamp_range = s.mix_clamp_range()
    tape = get_tape()

    def forward(mix):
        lam_x, gamma_leaf = mix.lambda_tensor()
        xi = as_tensor(pair.x_i) + pert.delta_i()
        xj = as_tensor(pair.x_j) + pert.delta_j()
        xm = mix_points(xi, xj, lam_x, clamp_range)
        lam_y = geometric_label_ratio(xi, xj, xm) if ab.geometric_labels else lam_x
        return kl_loss(s.model(xm), mix_labels(pair, lam_y)), gamma_leaf

    with s.model.frozen():
        for _ in range(a.steps):
            tape.reset()
            loss, gamma_leaf = forward(mix)
            if trace is not None:
                trace.append(float(loss.values))
            backward(loss)
            g_gamma = gamma_leaf.grad if gamma_leaf is not None else None
            g_delta = pert.leaf.grad
            tape.reset()
            pert.step(g_delta, a.step_size)
            if mix.optimizing:
                mix = ratio_step(mix, g_gamma, cfg.eta_gamma)
        if trace is not None:
            tape.reset()
            trace.append(float(forward(mix)[0].values))
            tape.reset()

    s.check(pert.values)
    d_i, d_j = pert.delta_arrays()
    xi, xj = pair.x_i + d_i, pair.x_j + d_j
    xm = s.in_range(mix_points(xi, xj, mix.lambda_x, clamp_range).values)
    lam_y = geometric_label_ratio(xi, xj, xm).values if ab.geometric_labels else mix.lambda_y
    return xm, mix_labels(pair, lam_y)


_SCHEME_STEPS = {
    "standard": _standard,
    "mixup": _mixup,
    "attack": _attack,
    "mix_then_attack": _mix_then_attack,
    "attack_then_mix": _attack_then_mix,
    "adv_mixup": adv_mixup_batch,
}


def _update(model: Model, state: OptimizerState, x, target) -> tuple[float, float]:
    tape = get_tape()
    tape.reset()
    logits = model(Tensor(x))
    loss = kl_loss(logits, target)
    value = float(loss.values)
    if not np.isfinite(value):
        tape.reset()
        return value, 0.0
    backward(loss)
    tape.reset()
    optimizer_step(state, model.params)
    model.zero_grad()
    correct = float(np.sum(predict(logits) == np.argmax(target, axis=1)))
    return value, correct


def train(cfg: TrainConfig, model: Model, data: Dataset, preprocessor: Preprocessor | None = None,
          scheme: str | None = None) -> RunMetrics:
    """Train ``model`` in place on ``data`` and return per-epoch metrics."""
    if scheme is not None and cfg.scheme != scheme:
        raise ValueError(f"config scheme {cfg.scheme!r} does not match {scheme!r}")
    started = time.perf_counter()
    prep = preprocessor or Preprocessor(data, augment_images=cfg.augment)
    attack = prep.attack_units(cfg.attack)
    streams = _Streams(cfg.seed)
    step = _Step(model, cfg, attack, prep.value_range(), streams)
    scheme_step = _SCHEME_STEPS[cfg.scheme]
    state = replace(cfg.optimizer, learning_rate=cfg.schedule.base_lr, buffers={})
    metrics = RunMetrics(scheme=cfg.scheme, seed=cfg.seed)
    n = len(data)
    k = data.class_count
    for epoch in range(cfg.epochs):
        state.learning_rate = cfg.schedule.lr_at(epoch, cfg.epochs)
        order = streams.order.permutation(n)
        total_loss = total_correct = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = prep(data.inputs[idx], streams.augment, train=True)
            y = one_hot(data.labels[idx], k)
            x_train, y_train = scheme_step(step, x, y)
            loss, correct = _update(model, state, x_train, y_train)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, step {b}")
            total_loss += loss * len(idx)
            total_correct += correct
        metrics.epochs.append(EpochMetrics(epoch, total_loss / n, total_correct / n,
                                           state.learning_rate))
    metrics.constraint_checks = step.checks
    metrics.wall_clock = time.perf_counter() - started
    return metrics


def train_standard(cfg, model, data, preprocessor=None):
    return train(cfg, model, data, preprocessor, scheme="standard")


def train_mixup(cfg, model, data, preprocessor=None):
    return train(cfg, model, data, preprocessor, scheme="mixup")


def train_pgd(cfg, model, data, preprocessor=None):
    return train(cfg, model, data, preprocessor, scheme="attack")


def train_mix_then_attack(cfg, model, data, preprocessor=None):
    return train(cfg, model, data, preprocessor, scheme="mix_then_attack")


def train_attack_then_mix(cfg, model, data, preprocessor=None):
    return train(cfg, model, data, preprocessor, scheme="attack_then_mix")


def train_adv_mixup(cfg, model, data, preprocessor=None):
    return train(cfg, model, data, preprocessor, scheme="adv_mixup")


def evaluate_model(model: Model, data: Dataset, attacks, seed: int = 0,
                   preprocessor: Preprocessor | None = None) -> dict:
    """Pristine and robust accuracy with attack budgets given in raw input units."""
    prep = preprocessor or Preprocessor(data)
    x = prep(data.inputs)
    cfgs = [prep.attack_units(c) for c in attacks]
    return evaluate_robust(model, x, data.labels, cfgs, seed=seed)
