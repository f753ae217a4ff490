"""Hand-written differentiable layers (f64), SGD, gradient checking, checkpoints.

Every layer caches what it needs in ``forward`` and consumes it in
``backward(dout) -> dinput``; parameter gradients accumulate into
``Parameter.grad``. Layers accept either plain (N, C) arrays or a
:class:`~radarsparse.grid.SparseGrid`, in which case they act on its
features and return a grid with the same active set.
"""
from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .grid import SparseGrid

CHECKPOINT_MAGIC = "# radarsparse-params v1"


class Parameter:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape})"


# per-module forward wall time, keyed by id(module); None disables timing
_timings: dict[int, float] | None = None


@contextmanager
def record_timings():
    """Collect forward wall time per module call inside the block."""
    global _timings
    prev, _timings = _timings, {}
    try:
        yield _timings
    finally:
        _timings = prev


class Module:
    """Base class: parameter/buffer discovery, train/eval mode, state dicts."""

    training: bool = True
    # names of plain ndarray attributes that belong in checkpoints
    _buffers: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        if _timings is None:
            return self.forward(*args, **kwargs)
        t0 = time.perf_counter()
        out = self.forward(*args, **kwargs)
        _timings[id(self)] = _timings.get(id(self), 0.0) + time.perf_counter() - t0
        return out

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(val, (Parameter, Module)):
                yield name, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for k, v in enumerate(val):
                    yield f"{name}.{k}", v
            elif isinstance(val, dict) and val and all(isinstance(v, Module) for v in val.values()):
                for k, v in val.items():
                    yield f"{name}.{k}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in self._children():
            if isinstance(child, Parameter):
                yield prefix + name, child
            else:
                yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for b in self._buffers:
            yield prefix + b, getattr(self, b)
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(prefix + name + ".")

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.value.copy() for n, p in self.named_parameters()}
        out.update({n: np.array(b, dtype=np.float64) for n, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {n for n, _ in self.named_buffers()}
        expected = set(params) | buffers
        missing = expected - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing '{sorted(missing)[0]}'")
        extra = set(state) - expected
        if extra:
            raise KeyError(f"checkpoint has unknown entry '{sorted(extra)[0]}'")
        for name, p in params.items():
            v = np.asarray(state[name], dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"shape mismatch for '{name}': checkpoint {v.shape}, model {p.shape}")
            p.value[...] = v
        for name in buffers:
            owner, attr = self._resolve(name)
            cur = getattr(owner, attr)
            v = np.asarray(state[name], dtype=np.float64)
            if v.shape != np.shape(cur):
                raise ValueError(f"shape mismatch for '{name}': checkpoint {v.shape}, model {np.shape(cur)}")
            owner._set_buffer(attr, v.copy())

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)

    def _resolve(self, dotted: str) -> tuple["Module", str]:
        obj = self
        parts = dotted.split(".")
        k = 0
        while k < len(parts) - 1:
            nxt = getattr(obj, parts[k], None)
            if isinstance(nxt, (list, tuple)):
                nxt = nxt[int(parts[k + 1])]
                k += 1
            elif isinstance(nxt, dict):
                nxt = nxt[parts[k + 1]]
                k += 1
            obj = nxt
            k += 1
        return obj, parts[-1]


def _feats(x):
    return (x.features, x) if isinstance(x, SparseGrid) else (np.asarray(x, dtype=np.float64), None)


def _wrap(y, grid):
    return grid.with_features(y) if grid is not None else y


# --------------------------------------------------------------------------
# parameters and layers


def init_params(shape, fan_in: int, seed: int | np.random.Generator) -> Parameter:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    bound = math.sqrt(1.0 / fan_in)
    rng = np.random.default_rng(seed)
    return Parameter(rng.uniform(-bound, bound, size=shape))


def linear(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y = x W^T + b."""
    W, b, x = np.asarray(W), np.asarray(b), np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ValueError(f"linear shape mismatch: W{W.shape}, b{b.shape}, x{x.shape}")
    return x @ W.T + b


def linear_backward(W: np.ndarray, x: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dW, db, dx) of ``linear`` for upstream ``dy``."""
    return dy.T @ x, dy.sum(axis=0), dy @ W


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, seed=0):
        rng = np.random.default_rng(seed)
        self.weight = init_params((c_out, c_in), c_in, rng)
        self.bias = init_params((c_out,), c_in, rng)
        self.macs = 0
        self.dense_macs = 0

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        f, grid = _feats(x)
        self._x = f
        self.macs = len(f) * self.c_in * self.c_out
        # on a grid the dense equivalent touches every cell
        self.dense_macs = (grid.spec.num_cells if grid is not None else len(f)) * self.c_in * self.c_out
        return _wrap(linear(self.weight.value, self.bias.value, f), grid)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dW, db, dx = linear_backward(self.weight.value, self._x, dy)
        self.weight.grad += dW
        self.bias.grad += db
        return dx


class ReLU(Module):
    def forward(self, x):
        f, grid = _feats(x)
        self._mask = f > 0
        return _wrap(np.where(self._mask, f, 0.0), grid)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, 0.0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


class BatchNorm(Module):
    """Per-channel batch normalization over the rows of (N, C).

    Training normalizes with the biased batch variance and folds the same
    statistics into the running estimates; eval uses the running estimates.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        if not 0 < momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        if not eps > 0:
            raise ValueError("eps must be positive")
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def forward(self, x):
        f, grid = _feats(x)
        if f.shape[1] != self.channels:
            raise ValueError(f"batchnorm expects {self.channels} channels, got {f.shape[1]}")
        if len(f) == 0:
            # nothing to normalise and no statistics to fold in
            self._cache = (f, np.ones(self.channels), self.training)
            return _wrap(f.copy(), grid)
        if self.training:
            if len(f) < 2:
                raise ValueError(f"batchnorm in train mode needs at least 2 rows, got {len(f)}")
            mean = f.mean(axis=0)
            var = f.var(axis=0)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * var
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (f - mean) * inv
        self._cache = (xhat, inv, self.training)
        return _wrap(xhat * self.gamma.value + self.beta.value, grid)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv, training = self._cache
        if len(dy) == 0:
            return np.zeros_like(dy)
        self.gamma.grad += (dy * xhat).sum(axis=0)
        self.beta.grad += dy.sum(axis=0)
        dxhat = dy * self.gamma.value
        if not training:
            return dxhat * inv
        n = len(dy)
        return inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


# --------------------------------------------------------------------------
# optimisation


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """v <- v - lr * grad, then zero the gradients."""
    if not lr >= 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for p in params:
        if lr:
            p.value -= lr * p.grad
        p.zero_grad()


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self) -> str:
        worst = sorted(self.errors.items(), key=lambda kv: -kv[1])[:3]
        status = "pass" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel err {self.max_error:.3e} (tol {self.tolerance:g}); worst {worst}"


def grad_check(closure: Callable[[], float], params: dict[str, Parameter] | Iterable[tuple[str, Parameter]],
               tolerance: float = 1e-6, max_coords: int = 32, h: float = 1e-5, seed: int = 0,
               floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``closure`` must zero nothing itself: it runs forward and backward,
    accumulating into ``Parameter.grad``, and returns the scalar loss.
    Tensors larger than ``max_coords`` are checked on a seeded random subset.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Deep networks
    with an O(1) loss have gradient entries below what central differences
    can resolve (about eps * |loss| / h); raise ``floor`` there.
    """
    params = dict(params)
    for p in params.values():
        p.zero_grad()
    loss0 = closure()
    if not np.isfinite(loss0):
        raise FloatingPointError(f"non-finite loss {loss0}")
    analytic = {n: p.grad.copy() for n, p in params.items()}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        size = p.value.size
        if size == 0:
            continue
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        flat = p.value.reshape(-1)
        worst = 0.0
        for c in coords:
            old = flat[c]
            flat[c] = old + h
            lp = closure()
            flat[c] = old - h
            lm = closure()
            flat[c] = old
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{c}]")
            num = (lp - lm) / (2 * h)
            a = analytic[name].reshape(-1)[c]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report.errors[name] = worst
    for p in params.values():
        p.zero_grad()
    return report


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: dict[str, np.ndarray], path: str | Path) -> None:
    """Text container: magic line, then one ``name<TAB>shape<TAB>values`` line per entry.

    ``shape`` is comma separated (empty for scalars); values are space
    separated ``repr`` floats in C order, so the round trip is exact.
    """
    lines = [CHECKPOINT_MAGIC]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype=np.float64)
        shape = ",".join(str(s) for s in arr.shape)
        values = " ".join(repr(v) for v in arr.reshape(-1).tolist())
        lines.append(f"{name}\t{shape}\t{values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (expected header '{CHECKPOINT_MAGIC}')")
    out = {}
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        try:
            name, shape, values = line.split("\t")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            vals = np.array([float(v) for v in values.split()], dtype=np.float64)
            out[name] = vals.reshape(dims)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed checkpoint entry ({exc})") from None
    return out
