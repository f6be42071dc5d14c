"""Dense numeric substrate: layers with explicit backward passes, Adam, RNG
streams and a finite-difference gradient checker.

Matrices are plain 2-D ``float64`` numpy arrays. The first layer of a network
may also receive a ``scipy.sparse`` matrix (bag-of-features input); no other
sparse algebra is supported.
"""
from __future__ import annotations

import contextlib
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError, NumericError, ShapeError, StateError

DTYPE = np.float64


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for a named subsystem, derived from the master seed."""
    key = zlib.crc32(stream.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key]))


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class Layer:
    """Base layer. ``forward`` caches what ``backward`` needs; backward
    accumulates parameter gradients and returns the gradient w.r.t. input."""

    name = "layer"

    def params(self) -> list[Param]:
        return []

    def forward(self, x, train: bool = True):
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray):
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class Linear(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 name: str = "linear"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.name = name
        if rng is None:
            w = np.zeros((out_dim, in_dim))
        else:
            w = glorot_uniform(rng, out_dim, in_dim)
        self.weight = Param(f"{name}.w", w)
        self.bias = Param(f"{name}.b", np.zeros(out_dim))
        self._x = None

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, x, train: bool = True):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}: expected (*, {self.in_dim}) input, got {x.shape}")
        self._x = x
        return _affine(x, self.weight.value, self.bias.value)

    def backward(self, grad_out: np.ndarray):
        if self._x is None:
            raise StateError(f"{self.name}: backward called before forward")
        grad_w, grad_b = _affine_param_grads(self._x, grad_out)
        self.weight.grad += grad_w
        self.bias.grad += grad_b
        if sp.issparse(self._x):
            # input layer over raw features; nothing upstream needs this
            return None
        return grad_out @ self.weight.value


def _affine(x, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if sp.issparse(x):
        out = np.asarray(x @ w.T)
    else:
        out = x @ w.T
    out += b
    return out


def _affine_param_grads(x, grad_out: np.ndarray):
    if grad_out.shape[0] != x.shape[0]:
        raise ShapeError(f"grad batch {grad_out.shape[0]} != input batch {x.shape[0]}")
    if sp.issparse(x):
        grad_w = np.asarray((x.T @ grad_out).T)
    else:
        grad_w = grad_out.T @ x
    return grad_w, grad_out.sum(axis=0)


class ReLU(Layer):
    name = "relu"

    def __init__(self):
        self._mask = None

    def forward(self, x, train: bool = True):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out):
        if self._mask is None:
            raise StateError("relu: backward called before forward")
        return np.where(self._mask, grad_out, 0.0)


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1/(1-rate)`` during training
    so evaluation is the identity."""

    name = "dropout"

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = float(rate)
        self.rng = rng
        self._frozen = False
        self._frozen_masks: dict[tuple, np.ndarray] = {}
        self._mask = None

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        if not value:
            self._frozen_masks.clear()
        self._frozen = value

    def forward(self, x, train: bool = True):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        mask = self._frozen_masks.get(x.shape) if self._frozen else None
        if mask is None:
            keep = 1.0 - self.rate
            mask = (self.rng.random(x.shape) < keep) / keep
            if self._frozen:
                self._frozen_masks[x.shape] = mask
        self._mask = mask
        return x * mask

    def backward(self, grad_out):
        if self._mask is None:
            return grad_out
        return grad_out * self._mask


class LogSoftmax(Layer):
    name = "log_softmax"

    def __init__(self):
        self._out = None

    def forward(self, x, train: bool = True):
        shifted = x - x.max(axis=1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self._out = out
        return out

    def backward(self, grad_out):
        if self._out is None:
            raise StateError("log_softmax: backward called before forward")
        return grad_out - np.exp(self._out) * grad_out.sum(axis=1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    return LogSoftmax().forward(x)


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer], name: str = "seq"):
        self.layers = list(layers)
        self.name = name

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, train: bool = True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad_out):
        g = grad_out
        for layer in reversed(self.layers):
            g = layer.backward(g)
            if g is None:
                break
        return g


def iter_layers(layer: Layer) -> Iterable[Layer]:
    yield layer
    for child in getattr(layer, "layers", ()):
        yield from iter_layers(child)


@contextlib.contextmanager
def frozen_noise(*layers: Layer):
    """Reuse the last dropout masks and stochastic-weight draws inside the block.

    The first forward inside the block draws fresh noise if none is cached;
    every later forward repeats it, which is what finite differencing needs.
    """
    noisy = [l for root in layers for l in iter_layers(root) if hasattr(l, "frozen")]
    saved = [l.frozen for l in noisy]
    for l in noisy:
        l.frozen = True
    try:
        yield
    finally:
        for l, s in zip(noisy, saved):
            l.frozen = s


def nll_loss(log_probs: np.ndarray, targets, weights=None) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. ``log_probs``.

    With ``weights`` the loss is ``sum(w_i * nll_i) / n`` (n = number of rows).
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, k = log_probs.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match batch {n}")
    if n == 0:
        return 0.0, np.zeros_like(log_probs)
    if targets.min() < 0 or targets.max() >= k:
        raise DataError(f"target out of range [0, {k}): {targets.min()}..{targets.max()}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=DTYPE)
    rows = np.arange(n)
    loss = float(-(w * log_probs[rows, targets]).sum() / n)
    grad = np.zeros_like(log_probs)
    grad[rows, targets] = -w / n
    return loss, grad


class Adam:
    """Adam with bias correction over a fixed list of parameters."""

    def __init__(self, params: Sequence[Param], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient in {p.name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    n_checked: int = 0
    per_param: dict[str, float] = field(default_factory=dict)
    worst: str | None = None

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def rel_error(a, b, floor: float = 1e-6):
    """|a-b| / max(|a|+|b|, floor); the floor keeps vanishing gradients from
    being judged on round-off alone."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)


def grad_check(loss_fn: Callable[[], float], params: Sequence[Param], h: float = 1e-5,
               max_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare ``p.grad`` (already filled by the caller) against central
    differences of ``loss_fn``. ``loss_fn`` must be deterministic; freeze
    dropout and weight noise before calling."""
    report = GradCheckReport()
    rng = rng or np.random.default_rng(0)
    for p in params:
        flat = p.value.reshape(-1)
        analytic = p.grad.reshape(-1).copy()
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, float(rel_error(analytic[i], numeric)))
        report.per_param[p.name] = worst
        report.n_checked += len(idx)
        if worst >= report.max_rel_err:
            report.max_rel_err = worst
            report.worst = p.name
    return report
