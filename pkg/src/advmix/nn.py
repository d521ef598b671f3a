"""Small classifiers, optimizers, the step learning-rate schedule, checkpoints."""

from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor, as_tensor, conv2d, relu

ARCHITECTURES = ("mlp", "small_conv", "mini_preact_resnet")
MAX_KERNEL = 5
MAX_RESNET_WIDTH = 64


class ModelSpecError(ValueError):
    """Raised when a ModelSpec cannot be turned into a network."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``widths`` are the hidden widths of an mlp; ``channels``/``kernel_sizes``
    describe the conv stack of small_conv; mini_preact_resnet uses ``blocks``
    residual blocks of width ``channels[0]`` (default 16).
    """

    architecture: str
    input_shape: tuple
    class_count: int
    widths: tuple = ()
    channels: tuple = ()
    kernel_sizes: tuple = ()
    blocks: int = 2
    init_seed: int = 0
    zero_init_final: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if self.architecture not in ARCHITECTURES:
            raise ModelSpecError(f"unknown architecture {self.architecture!r}")
        if self.class_count < 2:
            raise ModelSpecError("class_count must be at least 2")
        if not self.input_shape or any(s < 1 for s in self.input_shape):
            raise ModelSpecError(f"invalid input_shape {self.input_shape}")
        for name in ("widths", "channels", "kernel_sizes"):
            if any(v < 1 for v in getattr(self, name)):
                raise ModelSpecError(f"all {name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _uniform(rng, shape, fan_in):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """A parameter dict (in declaration order) plus a forward function."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self._layers: list = []
        rng = np.random.default_rng(spec.init_seed)
        build = {"mlp": self._build_mlp, "small_conv": self._build_conv,
                 "mini_preact_resnet": self._build_resnet}[spec.architecture]
        build(rng)

    # -- construction -----------------------------------------------------
    def _param(self, name, values):
        self.params[name] = Tensor(values, requires_grad=True, name=name)
        return name

    def _linear(self, rng, name, fan_in, fan_out, final=False):
        if final and self.spec.zero_init_final:
            w, b = np.zeros((fan_in, fan_out)), np.zeros(fan_out)
        else:
            w = _uniform(rng, (fan_in, fan_out), fan_in)
            b = _uniform(rng, (fan_out,), fan_in)
        return self._param(f"{name}.weight", w), self._param(f"{name}.bias", b)

    def _conv(self, rng, name, c_in, c_out, k, bias=True):
        if k > MAX_KERNEL or k % 2 == 0:
            raise ModelSpecError(f"layer {name}: kernel size {k} must be odd and <= {MAX_KERNEL}")
        fan_in = c_in * k * k
        w = self._param(f"{name}.weight", _uniform(rng, (c_out, c_in, k, k), fan_in))
        b = self._param(f"{name}.bias", _uniform(rng, (c_out,), fan_in)) if bias else None
        return w, b

    def _image_shape(self, layer):
        if len(self.spec.input_shape) != 3:
            raise ModelSpecError(
                f"layer {layer}: expected (channels, height, width) input, got {self.spec.input_shape}")
        return self.spec.input_shape

    def _build_mlp(self, rng):
        sizes = [int(np.prod(self.spec.input_shape)), *self.spec.widths, self.spec.class_count]
        for i in range(len(sizes) - 1):
            final = i == len(sizes) - 2
            w, b = self._linear(rng, f"fc{i}", sizes[i], sizes[i + 1], final=final)
            self._layers.append(("linear", w, b, not final))

    def _build_conv(self, rng):
        c, h, w_ = self._image_shape("conv0")
        channels = self.spec.channels or (8,)
        kernels = self.spec.kernel_sizes or (3,) * len(channels)
        if len(kernels) != len(channels):
            raise ModelSpecError("small_conv: kernel_sizes and channels must have equal length")
        for i, (c_out, k) in enumerate(zip(channels, kernels)):
            w, b = self._conv(rng, f"conv{i}", c, c_out, k)
            self._layers.append(("conv", w, b, k // 2))
            c = c_out
        w, b = self._linear(rng, "fc", c * h * w_, self.spec.class_count, final=True)
        self._layers.append(("linear", w, b, False))

    def _build_resnet(self, rng):
        c, h, w_ = self._image_shape("stem")
        width = self.spec.channels[0] if self.spec.channels else 16
        if width > MAX_RESNET_WIDTH:
            raise ModelSpecError(f"layer stem: width {width} exceeds {MAX_RESNET_WIDTH}")
        if self.spec.blocks < 1:
            raise ModelSpecError("mini_preact_resnet needs at least one block")
        w, b = self._conv(rng, "stem", c, width, 3)
        self._layers.append(("conv", w, b, 1))
        for i in range(self.spec.blocks):
            names = []
            for j in (1, 2):
                s = self._param(f"block{i}.scale{j}", np.ones((1, width, 1, 1)))
                t = self._param(f"block{i}.shift{j}", np.zeros((1, width, 1, 1)))
                cw, cb = self._conv(rng, f"block{i}.conv{j}", width, width, 3)
                names.append((s, t, cw, cb))
            self._layers.append(("preact_block", names))
        s = self._param("head.scale", np.ones((1, width, 1, 1)))
        t = self._param("head.shift", np.zeros((1, width, 1, 1)))
        self._layers.append(("affine_relu_pool", s, t))
        w, b = self._linear(rng, "fc", width, self.spec.class_count, final=True)
        self._layers.append(("linear", w, b, False))

    # -- forward ------------------------------------------------------------
    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        p = self.params
        expected = self.spec.input_shape
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"model expects input shape (N, {expected}), got {x.shape}")
        for layer in self._layers:
            kind = layer[0]
            if kind == "linear":
                _, w, b, act = layer
                if x.ndim != 2:
                    x = x.reshape(x.shape[0], -1)
                x = x @ p[w] + p[b]
                if act:
                    x = relu(x)
            elif kind == "conv":
                _, w, b, pad = layer
                x = relu(conv2d(x, p[w], p[b], padding=pad))
            elif kind == "preact_block":
                h = x
                for s, t, cw, cb in layer[1]:
                    h = relu(h * p[s] + p[t])
                    h = conv2d(h, p[cw], p[cb], padding=1)
                x = x + h
            elif kind == "affine_relu_pool":
                _, s, t = layer
                x = relu(x * p[s] + p[t]).mean(axis=(2, 3))
        return x

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.params.items()}

    @contextlib.contextmanager
    def frozen(self):
        """Disable parameter gradients, e.g. while an attacker queries the model."""
        flags = {k: t.requires_grad for k, t in self.params.items()}
        for t in self.params.values():
            t.requires_grad = False
        try:
            yield self
        finally:
            for k, t in self.params.items():
                t.requires_grad = flags[k]


def build_model(spec: ModelSpec) -> Model:
    return Model(spec)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    kind: str = "yogi"
    learning_rate: float = 0.003
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-3
    weight_decay: float = 5e-4
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "yogi"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def optimizer_step(state: OptimizerState, params: dict[str, Tensor], grads=None) -> None:
    """Update ``params`` in place from ``grads`` (defaults to each ``.grad``).

    Weight decay is folded into the gradient as g + wd*theta before the step.
    Parameters without a gradient are skipped.
    """
    lr = state.learning_rate
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name}")
        theta = p.values
        if state.weight_decay:
            g = g + state.weight_decay * theta
        buf = state.buffers.setdefault(name, {})
        if state.kind == "sgd_momentum":
            v = buf.get("v")
            v = g if v is None else state.momentum * v + g
            buf["v"] = v
            p.values = theta - lr * v
        else:
            m = buf.get("m", np.zeros_like(theta))
            v = buf.get("v", np.zeros_like(theta))
            g2 = g * g
            v = v - (1.0 - state.beta2) * np.sign(v - g2) * g2
            m = state.beta1 * m + (1.0 - state.beta1) * g
            buf["m"], buf["v"] = m, v
            p.values = theta - lr * m / (np.sqrt(v) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    """Multiply ``base_lr`` by ``factor`` at each milestone fraction of training."""

    base_lr: float = 0.003
    milestones: tuple = (0.7, 0.9)
    factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))
        ms = self.milestones
        if any(not 0 < m <= 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing in (0, 1], got {ms}")
        if not 0 < self.factor <= 1:
            raise ValueError("factor must lie in (0, 1]")

    def lr_at(self, epoch: int, total_epochs: int) -> float:
        if not 0 <= epoch < total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
        progress = epoch / total_epochs
        passed = sum(progress >= m - 1e-12 for m in self.milestones)
        return self.base_lr * self.factor ** passed


def lr_at(schedule: LrSchedule, epoch: int, total_epochs: int) -> float:
    return schedule.lr_at(epoch, total_epochs)


# ---------------------------------------------------------------------------
# Checkpoints: b"AMIX" | u32 version | u32 descriptor length | JSON descriptor
#              | little-endian float64 parameters in declaration order
# ---------------------------------------------------------------------------

MAGIC = b"AMIX"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    descriptor = {"spec": model.spec.to_dict(),
                  "params": [[k, list(t.shape)] for k, t in model.params.items()],
                  "extra": extra or {}}
    blob = json.dumps(descriptor, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for t in model.params.values():
            fh.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    """Return (model, extra) from a checkpoint written by save_checkpoint."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, n = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        descriptor = json.loads(data[12:12 + n].decode())
        model = build_model(ModelSpec.from_dict(descriptor["spec"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid descriptor ({exc})") from exc
    stored = [(k, tuple(s)) for k, s in descriptor["params"]]
    expected = [(k, t.shape) for k, t in model.params.items()]
    if stored != expected:
        raise CheckpointError(f"{path}: parameters do not match the stored model spec")
    offset = 12 + n
    for t in model.params.values():
        nbytes = t.size * 8
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated parameter data")
        t.values = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(t.shape)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return model, descriptor.get("extra", {})
