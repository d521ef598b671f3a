"""L-infinity attackers and the robust-accuracy evaluation harness.

All attackers maximize the same KL loss used for training.  Calls reset the
global tape and leave model parameters untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .mixup import init_delta, project_delta
from .nn import Model
from .objectives import as_distribution, kl_loss, kl_per_example, predict
from .tensor import Tensor, backward, get_tape, no_grad, sign

ATTACK_KINDS = ("pgd", "fgsm", "random_search")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """One attacker.  ``epsilon`` and ``step_size`` may be per-channel arrays
    broadcastable against a single example (see ``in_normalized_units``)."""

    epsilon: object = 8 / 255
    step_size: object = 2 / 255
    steps: int = 20
    restarts: int = 1
    init: str = "uniform"
    clamp_input_range: tuple | None = None
    name: str = "PGD20"
    kind: str = "pgd"
    queries: int = 500

    def __post_init__(self):
        if np.any(np.asarray(self.epsilon) < 0):
            raise ValueError("epsilon must be >= 0")
        if np.any(np.asarray(self.step_size) <= 0):
            raise ValueError("step_size must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.init not in ("uniform", "zero"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")

    def in_normalized_units(self, mean, std) -> "AttackConfig":
        """Express the budget in the units of per-channel (x - mean) / std inputs."""
        std = _channel_column(std)
        mean = _channel_column(mean)
        rng = None
        if self.clamp_input_range is not None:
            lo, hi = self.clamp_input_range
            rng = ((lo - mean) / std, (hi - mean) / std)
        return replace(self, epsilon=np.asarray(self.epsilon) / std,
                       step_size=np.asarray(self.step_size) / std, clamp_input_range=rng)


def _channel_column(v):
    v = np.asarray(v, dtype=float)
    return v.reshape(-1, 1, 1) if v.ndim == 1 else v


def project_linf(x_adv, x, epsilon, value_range=None) -> np.ndarray:
    """Project onto the eps-box around ``x`` (and the value range) such that the
    floating-point check ``abs(out - x) <= epsilon`` holds exactly."""
    out = x + np.clip(x_adv - x, -epsilon, epsilon)
    if value_range is not None:
        out = np.clip(out, *value_range)
    for _ in range(16):
        # x + d can round one ulp past the box edge
        bad = np.abs(out - x) > epsilon
        if not bad.any():
            break
        out = np.where(bad, np.nextafter(out, x), out)
    return out


def input_gradient(model: Model, x: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, float]:
    """Gradient of the batch KL loss with respect to the model input."""
    tape = get_tape()
    tape.reset()
    xin = Tensor(x, requires_grad=True)
    loss = kl_loss(model(xin), target)
    value = float(loss.values)
    if not np.isfinite(value):
        tape.reset()
        raise AttackError(f"non-finite loss {value} during attack")
    backward(loss)
    tape.reset()
    return xin.grad, value


def pgd_delta(model: Model, x, target, epsilon, step_size, steps: int, rng,
              init: str = "uniform", value_range=None) -> np.ndarray:
    """The sign-gradient inner loop: returns the final perturbation."""
    with model.frozen():
        delta = project_delta(x, init_delta(x.shape, epsilon, rng, init), epsilon, value_range)
        for _ in range(steps):
            g, _ = input_gradient(model, x + delta, target)
            delta = project_delta(x, delta + sign(g) * step_size, epsilon, value_range)
    return delta


def _losses(model: Model, x, target) -> np.ndarray:
    with no_grad():
        return kl_per_example(model(x).values, target)


def pgd_attack(model: Model, x, y, cfg: AttackConfig, rng, return_loss: bool = False):
    """Multi-restart PGD.  Per example, the restart with the highest final loss is kept."""
    x = np.asarray(x, dtype=float)
    target = as_distribution(y, model.spec.class_count)
    best_x, best_loss = x.copy(), np.full(len(x), -np.inf)
    for _ in range(cfg.restarts):
        delta = pgd_delta(model, x, target, cfg.epsilon, cfg.step_size, cfg.steps, rng,
                          cfg.init, cfg.clamp_input_range)
        cand = project_linf(x + delta, x, cfg.epsilon, cfg.clamp_input_range)
        loss = _losses(model, cand, target)
        better = loss > best_loss
        best_x[better] = cand[better]
        best_loss = np.where(better, loss, best_loss)
    return (best_x, best_loss) if return_loss else best_x


def fgsm_random_start(model: Model, x, y, cfg: AttackConfig, rng) -> np.ndarray:
    """Single signed-gradient step from a uniform random start."""
    x = np.asarray(x, dtype=float)
    target = as_distribution(y, model.spec.class_count)
    eps, vr = cfg.epsilon, cfg.clamp_input_range
    delta = project_delta(x, init_delta(x.shape, eps, rng, cfg.init), eps, vr)
    with model.frozen():
        g, _ = input_gradient(model, x + delta, target)
    delta = project_delta(x, delta + sign(g) * cfg.step_size, eps, vr)
    return project_linf(x + delta, x, eps, vr)


def _random_signs(rng, shape):
    return rng.integers(0, 2, size=shape) * 2.0 - 1.0


def random_search_attack(model: Model, x, y, cfg: AttackConfig, queries: int | None = None,
                         rng=None) -> np.ndarray:
    """Gradient-free search over corners of the eps-box, using only loss queries.

    The first query tries a random corner; later queries re-draw the signs of
    a random coordinate block (a square patch for image inputs) of the
    current best point and keep the change per example if the loss rises.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    queries = max(1, cfg.queries if queries is None else queries)
    x = np.asarray(x, dtype=float)
    target = as_distribution(y, model.spec.class_count)
    eps, vr = cfg.epsilon, cfg.clamp_input_range
    n = len(x)
    with model.frozen():
        best, best_loss = x.copy(), _losses(model, x, target)
        delta = np.zeros_like(x)
        for q in range(queries):
            if q == 0:
                cand_delta = _random_signs(rng, x.shape) * eps
            else:
                frac = 0.5 * 0.5 ** (8 * q // queries)
                cand_delta = np.broadcast_to(delta, x.shape).copy()
                if x.ndim == 4:
                    _, c, h, w = x.shape
                    side = max(1, int(round(np.sqrt(frac * h * w))))
                    for k in range(n):
                        r0, c0 = rng.integers(0, h - side + 1), rng.integers(0, w - side + 1)
                        patch = _random_signs(rng, (c, 1, 1)) * np.ones((c, side, side))
                        e = np.broadcast_to(eps, (c, h, w))[:, r0:r0 + side, c0:c0 + side]
                        cand_delta[k, :, r0:r0 + side, c0:c0 + side] = patch * e
                else:
                    flat = cand_delta.reshape(n, -1)
                    d = flat.shape[1]
                    size = max(1, int(round(frac * d)))
                    e_flat = np.broadcast_to(eps, x.shape).reshape(n, -1)
                    for k in range(n):
                        idx = rng.choice(d, size=size, replace=False)
                        flat[k, idx] = _random_signs(rng, size) * e_flat[k, idx]
                    cand_delta = flat.reshape(x.shape)
            cand = project_linf(x + cand_delta, x, eps, vr)
            loss = _losses(model, cand, target)
            better = loss > best_loss
            best[better] = cand[better]
            best_loss = np.where(better, loss, best_loss)
            delta = best - x
    return best


def shard_rng(run_seed: int, shard_index: int, stream: int = 0) -> np.random.Generator:
    """Counter-based stream: independent of how many shards are in flight."""
    return np.random.default_rng([int(run_seed), int(stream), int(shard_index)])


def run_attack(model: Model, x, y, cfg: AttackConfig, rng) -> np.ndarray:
    if cfg.kind == "pgd":
        return pgd_attack(model, x, y, cfg, rng)
    if cfg.kind == "fgsm":
        return fgsm_random_start(model, x, y, cfg, rng)
    return random_search_attack(model, x, y, cfg, rng=rng)


def evaluate_robust(model: Model, x, labels, cfgs, seed: int = 0, shard_size: int = 256) -> dict:
    """Pristine accuracy and robust accuracy per attacker name.

    An example counts as robust only if it is classified correctly both
    before and after the attack.
    """
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    with no_grad():
        clean_ok = predict(model(x)) == labels if len(x) else np.zeros(0, bool)
    out = {"pristine": float(clean_ok.mean()) if len(x) else 0.0}
    # every attacker sees the same per-shard stream, so PGD20 and PGD100 are
    # paired: they share random starts and the first 20 iterates
    for cfg in cfgs:
        ok = np.zeros(len(x), dtype=bool)
        for s, start in enumerate(range(0, len(x), shard_size)):
            sl = slice(start, start + shard_size)
            adv = run_attack(model, x[sl], labels[sl], cfg, shard_rng(seed, s))
            with no_grad():
                ok[sl] = clean_ok[sl] & (predict(model(adv)) == labels[sl])
        out[cfg.name] = float(ok.mean()) if len(x) else 0.0
    return out
