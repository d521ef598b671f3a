"""Central finite-difference checks for every differentiable op and for the
end-to-end loss chains into the perturbation and the ratio parameter."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .mixup import PerturbationState, geometric_label_ratio, lambda_from_gamma, mix_labels, mix_points
from .nn import ModelSpec, build_model
from .objectives import kl_loss, one_hot

OP_TOLERANCE = 1e-4
CHAIN_TOLERANCE = 1e-3
STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    instances: int
    errors: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.errors and self.max_rel_error < self.tolerance


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), zero when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-10:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def numeric_grads(f, arrays: list[np.ndarray], h: float = STEP) -> list[np.ndarray]:
    """Central differences of scalar ``f(*arrays)`` with respect to each array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            up = f(*arrays)
            a[idx] = old - h
            down = f(*arrays)
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def check_function(fn, arrays: list[np.ndarray], wrt=None, h: float = STEP) -> float:
    """Compare backprop against central differences for ``fn(*tensors) -> Tensor``.

    Non-scalar outputs are reduced with fixed random weights.  ``wrt`` selects
    the argument positions to differentiate (default: all).
    """
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    weights = {}

    def scalar(*xs, tape_grad=False):
        ts = [T.Tensor(x, requires_grad=tape_grad and i in wrt) for i, x in enumerate(xs)]
        out = fn(*ts)
        if "w" not in weights:
            weights["w"] = np.random.default_rng(1234).normal(size=out.shape)
        return (out * weights["w"]).sum(), ts

    with T.use_tape(T.Tape()):
        loss, ts = scalar(*arrays, tape_grad=True)
        T.backward(loss)
        analytic = [ts[i].grad if ts[i].grad is not None else np.zeros_like(arrays[i]) for i in wrt]

        def f(*sub):
            xs = list(arrays)
            for i, s in zip(wrt, sub):
                xs[i] = s
            with T.no_grad():
                return float(scalar(*xs)[0].values)

        numeric = numeric_grads(f, [arrays[i].copy() for i in wrt], h)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


# ---------------------------------------------------------------------------
# Instances: each builder returns (fn, arrays) for one random case
# ---------------------------------------------------------------------------


def _shape(rng, ndim=2, lo=1, hi=4):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=ndim))


def _away_from(rng, shape, points=(0.0,), margin=0.05, scale=1.0):
    # keep samples clear of kinks so central differences stay on one side
    x = rng.normal(0.0, scale, shape)
    for p in points:
        side = np.where(x >= p, 1.0, -1.0)
        x = np.where(np.abs(x - p) < margin, x + 2 * margin * side, x)
    return x


def _binary(op):
    def build(rng):
        s = _shape(rng)
        bshape = s if rng.random() < 0.5 else (1, s[1])
        a = rng.normal(size=s)
        b = rng.normal(size=bshape)
        if op is T.div:
            b = np.sign(b) * (np.abs(b) + 0.5)
        return op, [a, b]
    return build


def _unary(op, positive=False, kinks=None):
    def build(rng):
        s = _shape(rng, rng.integers(1, 4))
        if positive:
            a = rng.uniform(0.1, 2.0, s)
        elif kinks is not None:
            a = _away_from(rng, s, kinks)
        else:
            a = rng.normal(size=s)
        return op, [a]
    return build


def _matmul(rng):
    n, k, m = _shape(rng, 3)
    return T.matmul, [rng.normal(size=(n, k)), rng.normal(size=(k, m))]


def _dot(rng):
    k = int(rng.integers(1, 6))
    return T.dot, [rng.normal(size=k), rng.normal(size=k)]


def _axis_op(name):
    def build(rng):
        s = _shape(rng, 3)
        axis = int(rng.integers(-1, 3)) if name in ("sum", "mean") else int(rng.integers(0, 3))
        if name == "sum":
            kd = bool(rng.random() < 0.5)
            return (lambda a: a.sum(axis=None if axis < 0 else axis, keepdims=kd)), [rng.normal(size=s)]
        if name == "mean":
            return (lambda a: a.mean(axis=None if axis < 0 else axis)), [rng.normal(size=s)]
        op = T.softmax if name == "softmax" else T.log_softmax
        return (lambda a: op(a, axis=axis)), [rng.normal(size=s) * 3]
    return build


def _clamp(rng):
    s = _shape(rng)
    lo, hi = -0.5, 0.7
    a = _away_from(rng, s, (lo, hi))
    return (lambda t: T.clamp(t, lo, hi)), [a]


def _reshape(rng):
    s = _shape(rng, 3)
    return (lambda t: t.reshape((s[0], -1))), [rng.normal(size=s)]


def _slice(rng):
    s = _shape(rng, 2, lo=2, hi=5)
    r = int(rng.integers(1, s[0]))
    return (lambda t: t[r:, ::2]), [rng.normal(size=s)]


def _take(rng):
    n = int(rng.integers(2, 6))
    idx = rng.integers(0, n, size=int(rng.integers(1, 8)))
    return (lambda t: T.take(t, idx)), [rng.normal(size=(n, 3))]


def _concat(rng):
    axis = int(rng.integers(0, 2))
    s1, s2 = list(_shape(rng)), list(_shape(rng))
    s2[1 - axis] = s1[1 - axis]
    return (lambda a, b: T.concat([a, b], axis=axis)), [rng.normal(size=s1), rng.normal(size=s2)]


def _conv2d(rng):
    n, c, o = (int(v) for v in rng.integers(1, 3, size=3))
    k = int(rng.choice([1, 3]))
    side = int(rng.integers(k, k + 3))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    x = rng.normal(size=(n, c, side, side))
    w = rng.normal(size=(o, c, k, k))
    b = rng.normal(size=o)
    return (lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=padding)), [x, w, b]


OP_CASES = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div),
    "neg": _unary(lambda a: -a),
    "matmul": _matmul,
    "dot": _dot,
    "relu": _unary(T.relu, kinks=(0.0,)),
    "sigmoid": _unary(T.sigmoid),
    "log": _unary(T.log, positive=True),
    "exp": _unary(T.exp),
    "xlogx": _unary(T.xlogx, positive=True),
    "softmax": _axis_op("softmax"),
    "log_softmax": _axis_op("log_softmax"),
    "sum": _axis_op("sum"),
    "mean": _axis_op("mean"),
    "clamp": _clamp,
    "reshape": _reshape,
    "slice": _slice,
    "take": _take,
    "concat": _concat,
    "conv2d": _conv2d,
}


# ---------------------------------------------------------------------------
# End-to-end chains through the mixing step, a small network and the KL loss
# ---------------------------------------------------------------------------


def _relu_margin(model, x: np.ndarray) -> float:
    """Smallest |pre-activation| over the hidden layers of an mlp."""
    h = x.reshape(len(x), -1)
    margin = np.inf
    for name in [k for k in model.params if k.endswith(".weight")][:-1]:
        z = h @ model.params[name].values + model.params[name[:-6] + "bias"].values
        margin = min(margin, float(np.min(np.abs(z))))
        h = np.maximum(z, 0.0)
    return margin


def _chain_setup(rng):
    m, d, k = int(rng.integers(2, 5)), int(rng.integers(2, 4)), int(rng.integers(2, 4))
    model = build_model(ModelSpec("mlp", (d,), k, widths=(6,), init_seed=int(rng.integers(1 << 31))))
    x = rng.normal(size=(m, d))
    perm = rng.permutation(m)
    y = one_hot(rng.integers(0, k, m), k)
    return model, x, perm, y


def _safe(build):
    """Redraw instances whose network input lies too close to a ReLU kink."""
    def wrapped(rng):
        while True:
            fn, arrays, probe = build(rng)
            if probe() > 1e-3:
                return fn, arrays
    return wrapped


@_safe
def _delta_chain(rng):
    model, x, perm, y = _chain_setup(rng)
    mode = "shared" if rng.random() < 0.5 else "independent"
    rows = len(x) if mode == "shared" else 2 * len(x)
    eps = 0.3
    delta0 = rng.uniform(-eps, eps, (rows, x.shape[1]))
    lam = rng.uniform(0.05, 0.95, len(x))

    def fn(delta):
        pert = PerturbationState(delta.values, eps, perm, mode)
        pert.leaf = delta
        xm = mix_points(T.as_tensor(x) + pert.delta_i(), T.as_tensor(x[perm]) + pert.delta_j(), lam)
        return kl_loss(model(xm), mix_labels(y, lam, y[perm]))

    def probe():
        d_i, d_j = (delta0, delta0[perm]) if mode == "shared" else (delta0[:len(x)], delta0[len(x):])
        xm = lam[:, None] * (x + d_i) + (1 - lam[:, None]) * (x[perm] + d_j)
        return _relu_margin(model, xm)

    return fn, [delta0], probe


@_safe
def _gamma_chain(rng):
    model, x, perm, y = _chain_setup(rng)
    kappa = float(rng.uniform(0.0, 0.9))
    geometric = bool(rng.random() < 0.5)
    d_i = rng.uniform(-0.3, 0.3, x.shape)
    d_j = rng.uniform(-0.3, 0.3, x.shape)
    gamma0 = rng.normal(size=len(x))
    xi, xj = x + d_i, x[perm] + d_j

    def fn(gamma):
        lam = lambda_from_gamma(gamma, kappa)
        xm = mix_points(xi, xj, lam)
        lam_y = geometric_label_ratio(xi, xj, xm) if geometric else lam
        return kl_loss(model(xm), mix_labels(y, lam_y, y[perm]))

    def probe():
        lam = lambda_from_gamma(gamma0, kappa)[:, None]
        return _relu_margin(model, lam * xi + (1 - lam) * xj)

    return fn, [gamma0], probe


CHAIN_CASES = {
    "chain:dloss/ddelta": _delta_chain,
    "chain:dloss/dgamma": _gamma_chain,
}


def run_case(name: str, build, tolerance: float, instances: int, seed: int) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    res = CheckResult(name, 0.0, tolerance, instances)
    for i in range(instances):
        try:
            fn, arrays = build(rng)
            res.max_rel_error = max(res.max_rel_error, check_function(fn, arrays))
        except Exception as exc:  # a crashing backward is a failed check, not a crash of the suite
            res.errors.append(f"instance {i}: {type(exc).__name__}: {exc}")
    return res


def run_suite(seed: int = 0, instances: int = 100, only=None) -> list[CheckResult]:
    cases = [(n, b, OP_TOLERANCE) for n, b in OP_CASES.items()]
    cases += [(n, b, CHAIN_TOLERANCE) for n, b in CHAIN_CASES.items()]
    return [run_case(n, b, tol, instances, seed) for n, b, tol in cases
            if only is None or n in only]


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'check':24s} {'max rel err':>12s} {'tol':>8s}  status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:24s} {r.max_rel_error:12.3e} {r.tolerance:8.0e}  {status}")
        lines.extend(f"    {e}" for e in r.errors[:3])
    failed = [r.name for r in results if not r.passed]
    lines.append("all checks passed" if not failed else "failed: " + ", ".join(failed))
    return "\n".join(lines)
