"""Network components: shared extractor, stochastic domain-specific extractor,
classifier and domain discriminator, plus the shared-private baseline that
keeps one deterministic private extractor per domain."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ShapeError, StateError
from .nn_core import (Dropout, Layer, Linear, LogSoftmax, Param, ReLU, Sequential,
                      _affine, _affine_param_grads, make_rng)

log = logging.getLogger(__name__)

LOGVAR_FLOOR = -20.0
CHECKPOINT_VERSION = 1


class StochasticLinear(Layer):
    """Fully connected layer whose weights and bias are drawn from a diagonal
    Gaussian: ``W = mu + exp(0.5 * logvar) * eps`` with ``eps ~ N(0, I)``.

    One draw is made per forward call. ``mode`` is ``"sample"`` or ``"mean"``;
    when left as ``None`` it follows the ``train`` flag.
    """

    def __init__(self, in_dim: int, out_dim: int, rng_init: np.random.Generator,
                 rng_eps: np.random.Generator, logvar_init: float = -4.0,
                 name: str = "stoch"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.name = name
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.mu_w = Param(f"{name}.mu", rng_init.uniform(-limit, limit, (out_dim, in_dim)))
        self.logvar_w = Param(f"{name}.logvar", np.full((out_dim, in_dim), logvar_init))
        self.mu_b = Param(f"{name}.bias_mu", np.zeros(out_dim))
        self.logvar_b = Param(f"{name}.bias_logvar", np.full(out_dim, logvar_init))
        self.rng = rng_eps
        self.mode: str | None = None
        self._frozen = False
        self._frozen_eps = None
        self._cache = None

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        if not value:
            self._frozen_eps = None
        self._frozen = value

    def params(self) -> list[Param]:
        return [self.mu_w, self.logvar_w, self.mu_b, self.logvar_b]

    def _resolve_mode(self, train: bool) -> str:
        mode = self.mode or ("sample" if train else "mean")
        if mode not in ("sample", "mean"):
            raise ConfigError(f"unknown stochastic mode {mode!r}")
        return mode

    def draw_eps(self, mode: str):
        if mode == "mean":
            return np.zeros_like(self.mu_w.value), np.zeros_like(self.mu_b.value)
        if self.frozen and self._frozen_eps is not None:
            return self._frozen_eps
        eps = (self.rng.standard_normal(self.mu_w.shape), self.rng.standard_normal(self.mu_b.shape))
        if self.frozen:
            self._frozen_eps = eps
        return eps

    def set_eps(self, eps_w: np.ndarray, eps_b: np.ndarray) -> None:
        """Pin the noise used by every following sampled forward (implies frozen)."""
        self.frozen = True
        self._frozen_eps = (np.asarray(eps_w, dtype=float), np.asarray(eps_b, dtype=float))

    def sample_weights(self, mode: str = "sample"):
        """Effective (weight, bias) for one draw, together with the noise used."""
        eps_w, eps_b = self.draw_eps(mode)
        if mode == "mean":
            return self.mu_w.value.copy(), self.mu_b.value.copy(), (eps_w, eps_b)
        sd_w = np.exp(0.5 * np.maximum(self.logvar_w.value, LOGVAR_FLOOR))
        sd_b = np.exp(0.5 * np.maximum(self.logvar_b.value, LOGVAR_FLOOR))
        return self.mu_w.value + sd_w * eps_w, self.mu_b.value + sd_b * eps_b, (eps_w, eps_b)

    def forward(self, x, train: bool = True):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}: expected (*, {self.in_dim}) input, got {x.shape}")
        mode = self._resolve_mode(train)
        w, b, eps = self.sample_weights(mode)
        self._cache = (x, w, eps, mode)
        return _affine(x, w, b)

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        x, w, (eps_w, eps_b), mode = self._cache
        grad_w, grad_b = _affine_param_grads(x, grad_out)
        self.mu_w.grad += grad_w
        self.mu_b.grad += grad_b
        if mode == "sample":
            for lv, g, eps in ((self.logvar_w, grad_w, eps_w), (self.logvar_b, grad_b, eps_b)):
                active = lv.value > LOGVAR_FLOOR
                lv.grad += np.where(active, g * eps * 0.5 * np.exp(0.5 * lv.value), 0.0)
        if sp.issparse(x):
            return None
        return grad_out @ w

    def variances(self) -> np.ndarray:
        """Flattened diagonal of the weight covariance (weights, then bias)."""
        return np.exp(np.concatenate([self.logvar_w.value.ravel(), self.logvar_b.value.ravel()]))


def mlp(dims: Sequence[int], dropout: float, rng_init, rng_drop, name: str,
        final_activation: bool = False) -> list[Layer]:
    """Linear/ReLU/Dropout stack over ``dims``; the last Linear is bare unless
    ``final_activation``."""
    layers: list[Layer] = []
    n = len(dims) - 1
    for i in range(n):
        layers.append(Linear(dims[i], dims[i + 1], rng_init, name=f"{name}.layer{i}"))
        if i < n - 1 or final_activation:
            layers.append(ReLU())
            layers.append(Dropout(dropout, rng_drop))
    return layers


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    num_classes: int
    num_domains: int
    hidden: tuple[int, ...] = (1000, 500)
    shared_dim: int = 128
    specific_dim: int = 64
    dropout: float = 0.4
    logvar_init: float = -4.0

    def __post_init__(self):
        if self.num_domains < 1 or self.num_classes < 1 or self.input_dim < 1:
            raise ConfigError(f"invalid architecture {self}")


class MDTCModel:
    """Shared state for SAN and the shared-private baseline.

    Subclasses provide ``specific_forward``/``specific_backward`` and the
    domain-specific parameter list.
    """

    kind = "base"

    def __init__(self, arch: Architecture, seed: int = 0):
        self.arch = arch
        self.seed = seed
        rng_init = make_rng(seed, "init")
        self.rng_drop = make_rng(seed, "dropout")
        a = arch
        self.fs = Sequential(mlp((a.input_dim, *a.hidden, a.shared_dim), a.dropout, rng_init,
                                 self.rng_drop, "fs"), name="fs")
        self._build_specific(rng_init)
        cat = a.shared_dim + a.specific_dim
        self.clf = Sequential(mlp((cat, cat, a.num_classes), a.dropout, rng_init, self.rng_drop,
                                  "clf") + [LogSoftmax()], name="clf")
        self.disc = Sequential(mlp((a.shared_dim, a.shared_dim, a.num_domains), a.dropout,
                                   rng_init, self.rng_drop, "disc") + [LogSoftmax()], name="disc")

    def _build_specific(self, rng_init) -> None:
        raise NotImplementedError

    def specific_forward(self, x, domain: int, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def specific_backward(self, grad, domain: int):
        raise NotImplementedError

    def specific_params(self) -> list[Param]:
        raise NotImplementedError

    def specific_modules(self) -> list[Layer]:
        raise NotImplementedError

    def main_params(self) -> list[Param]:
        return self.fs.params() + self.specific_params() + self.clf.params()

    def disc_params(self) -> list[Param]:
        return self.disc.params()

    def all_params(self) -> list[Param]:
        return self.main_params() + self.disc_params()

    def modules(self) -> list[Layer]:
        return [self.fs, *self.specific_modules(), self.clf, self.disc]

    def zero_grad(self) -> None:
        for p in self.all_params():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.all_params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.all_params()}
        missing = set(params) - set(state)
        if missing:
            raise ShapeError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for name, p in params.items():
            v = np.asarray(state[name], dtype=float)
            if v.shape != p.value.shape:
                raise ShapeError(f"{name}: checkpoint shape {v.shape} != model shape {p.value.shape}")
            p.value[...] = v

    def param_count(self) -> dict[str, int]:
        counts = {
            "F_s": sum(p.size for p in self.fs.params()),
            "F_d": sum(p.size for p in self.specific_params()),
            "C": sum(p.size for p in self.clf.params()),
            "D": sum(p.size for p in self.disc.params()),
        }
        counts["total"] = sum(counts.values())
        return counts


class SAN(MDTCModel):
    """One domain-specific extractor whose last layer is stochastic."""

    kind = "san"

    def _build_specific(self, rng_init) -> None:
        a = self.arch
        prefix = mlp((a.input_dim, *a.hidden), a.dropout, rng_init, self.rng_drop, "fd",
                     final_activation=True)
        last_in = a.hidden[-1] if a.hidden else a.input_dim
        self.stoch = StochasticLinear(last_in, a.specific_dim, rng_init, make_rng(self.seed, "eps"),
                                      logvar_init=a.logvar_init, name="fd.stoch")
        self.fd = Sequential(prefix + [self.stoch], name="fd")

    def specific_forward(self, x, domain: int, train: bool = True) -> np.ndarray:
        return self.fd.forward(x, train)

    def specific_backward(self, grad, domain: int):
        return self.fd.backward(grad)

    def specific_params(self) -> list[Param]:
        return self.fd.params()

    def specific_modules(self) -> list[Layer]:
        return [self.fd]

    def clamp_logvar(self) -> None:
        for p in (self.stoch.logvar_w, self.stoch.logvar_b):
            np.maximum(p.value, LOGVAR_FLOOR, out=p.value)


class SharedPrivate(MDTCModel):
    """Baseline with ``num_domains`` independent deterministic private extractors."""

    kind = "shared_private"

    def _build_specific(self, rng_init) -> None:
        a = self.arch
        self.fds = [
            Sequential(mlp((a.input_dim, *a.hidden, a.specific_dim), a.dropout, rng_init,
                           self.rng_drop, f"fd{i}"), name=f"fd{i}")
            for i in range(a.num_domains)
        ]

    def specific_forward(self, x, domain: int, train: bool = True) -> np.ndarray:
        return self.fds[domain].forward(x, train)

    def specific_backward(self, grad, domain: int):
        return self.fds[domain].backward(grad)

    def specific_params(self) -> list[Param]:
        return [p for fd in self.fds for p in fd.params()]

    def specific_modules(self) -> list[Layer]:
        return list(self.fds)

    def single_extractor_count(self) -> int:
        return sum(p.size for p in self.fds[0].params())


def build_model(kind: str, arch: Architecture, seed: int = 0) -> MDTCModel:
    if kind == "san":
        return SAN(arch, seed)
    if kind == "shared_private":
        return SharedPrivate(arch, seed)
    raise ConfigError(f"unknown model mode {kind!r}")


@dataclass
class Features:
    shared: np.ndarray
    specific: np.ndarray

    @property
    def concat(self) -> np.ndarray:
        return np.concatenate([self.shared, self.specific], axis=1)


def forward_features(model: MDTCModel, x, domain: int, mode: str = "mean",
                     train: bool = False) -> Features:
    """Shared and domain-specific features for one single-domain batch.

    ``mode`` selects sampled or mean weights for the stochastic layer,
    independent of ``train`` (which governs dropout only).
    """
    if x.shape[1] != model.arch.input_dim:
        raise ShapeError(f"input dim {x.shape[1]} != model input dim {model.arch.input_dim}")
    shared = model.fs.forward(x, train)
    stoch = getattr(model, "stoch", None)
    if stoch is not None:
        saved, stoch.mode = stoch.mode, mode
        try:
            specific = model.specific_forward(x, domain, train)
        finally:
            stoch.mode = saved
    else:
        specific = model.specific_forward(x, domain, train)
    return Features(shared, specific)


def extract_features(model: MDTCModel, x, domain: int, mode: str = "mean",
                     chunk: int = 1024) -> Features:
    """Evaluation-mode features for a whole split, computed in row chunks."""
    n = x.shape[0]
    if n == 0:
        a = model.arch
        return Features(np.zeros((0, a.shared_dim)), np.zeros((0, a.specific_dim)))
    parts = [forward_features(model, x[i:i + chunk], domain, mode, train=False)
             for i in range(0, n, chunk)]
    return Features(np.vstack([p.shared for p in parts]), np.vstack([p.specific for p in parts]))


def predict_log_probs(model: MDTCModel, concat: np.ndarray) -> np.ndarray:
    return model.clf.forward(concat, train=False)


def save_checkpoint(path, model: MDTCModel, config: dict | None = None,
                    extra: dict | None = None) -> None:
    """npz container of named tensors plus a JSON metadata record."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "seed": model.seed,
        "arch": {**model.arch.__dict__, "hidden": list(model.arch.hidden)},
        "config": config or {},
        "extra": extra or {},
    }
    tensors = model.state_dict()
    tensors["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **tensors)


def load_checkpoint(path) -> tuple[MDTCModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ShapeError(f"unsupported checkpoint version {meta.get('format_version')}")
        arch_d = dict(meta["arch"])
        arch_d["hidden"] = tuple(arch_d["hidden"])
        model = build_model(meta["kind"], Architecture(**arch_d), meta["seed"])
        model.load_state_dict({k: z[k] for k in z.files if k != "__meta__"})
    return model, meta


def export_variances(model: SAN, path) -> int:
    """Write the flattened exp(logvar) values of the stochastic layer as CSV."""
    values = model.stoch.variances()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variance"])
        for v in values:
            w.writerow([repr(float(v))])
    return len(values)
