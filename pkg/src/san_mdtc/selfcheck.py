"""Fast numerical self-check: finite-difference gradients of every layer and
objective, mixture recovery by EM, and spherical centers against a
brute-force search.

``mutation="stochastic_sign"`` flips the sign of the log-variance gradient
inside the stochastic layer's backward pass. A healthy checker must report
that run as failed; the test-suite and ``san-mdtc selfcheck --mutate`` use it
to show the harness actually bites.
"""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import sample_distance_mixture
from .model import Architecture, StochasticLinear, build_model
from .nn_core import (Dropout, LogSoftmax, Linear, Param, ReLU, frozen_noise, grad_check,
                      make_rng)
from .objectives import (DomainBatch, LabeledBatch, PseudoBatch, classification_loss,
                         domain_objective, main_objective, rplr_loss)
from .rplr import class_centers, em_fit, normalize_to_sphere

GRAD_TOL = 1e-4
MUTATIONS = ("stochastic_sign",)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


@dataclass
class SelfCheckReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def table(self) -> str:
        rows = ["check\tstatus\tseconds\tdetail"]
        rows += [f"{r.name}\t{'PASS' if r.passed else 'FAIL'}\t{r.seconds:.2f}\t{r.detail}"
                 for r in self.results]
        return "\n".join(rows)


@contextlib.contextmanager
def _sign_flip():
    orig = StochasticLinear.backward

    def broken(self, grad_out):
        before = [self.logvar_w.grad.copy(), self.logvar_b.grad.copy()]
        out = orig(self, grad_out)
        for p, b in zip((self.logvar_w, self.logvar_b), before):
            p.grad[...] = b - (p.grad - b)
        return out

    StochasticLinear.backward = broken
    try:
        yield
    finally:
        StochasticLinear.backward = orig


def _probe_check(layer, x: np.ndarray, rng, extra: list[Param] = ()) -> float:
    """Gradient of <layer(x), probe> with respect to the layer params and input."""
    xp = Param("x", x.copy())
    with frozen_noise(layer):
        probe = rng.standard_normal(layer.forward(xp.value, train=True).shape)
        for p in layer.params():
            p.zero_grad()
        xp.grad[...] = layer.backward(probe)

        def f():
            return float((layer.forward(xp.value, train=True) * probe).sum())
        return grad_check(f, list(layer.params()) + list(extra) + [xp]).max_rel_err


def check_layers(seeds: int = 10) -> float:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 5))
        # keep ReLU inputs away from the kink
        x_relu = np.where(np.abs(x) < 0.05, 0.5, x)
        worst = max(worst,
                    _probe_check(Linear(5, 3, make_rng(seed, "init")), x, rng),
                    _probe_check(ReLU(), x_relu, rng),
                    _probe_check(Dropout(0.3, make_rng(seed, "dropout")), x, rng),
                    _probe_check(LogSoftmax(), x, rng),
                    _probe_check(StochasticLinear(5, 3, make_rng(seed, "init"), make_rng(seed, "eps"),
                                                  logvar_init=-1.0), x, rng))
    return worst


def _tiny_model(seed: int):
    arch = Architecture(6, 3, 3, hidden=(5, 4), shared_dim=3, specific_dim=2, dropout=0.3)
    model = build_model("san", arch, seed)
    rng = np.random.default_rng(seed)
    for p in model.all_params():
        if p.name.endswith(".b") or p.name.endswith("bias_mu"):
            p.value[...] = rng.standard_normal(p.shape) * 0.1
    return model


def check_objectives(seeds: int = 10) -> float:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        model = _tiny_model(seed)
        lab = [LabeledBatch(i, rng.standard_normal((4, 6)), rng.integers(0, 3, 4)) for i in range(3)]
        mix = [DomainBatch(i, rng.standard_normal((4, 6))) for i in range(3)]
        pse = [PseudoBatch(i, rng.standard_normal((4, 6)), rng.integers(0, 3, 4),
                           np.array([0.0, 0.7, 0.95, 0.55])) for i in range(3)]
        cases: list[tuple[Callable, Callable, list]] = [
            (lambda: classification_loss(model, lab, backward=False)[0],
             lambda: classification_loss(model, lab), model.main_params()),
            (lambda: domain_objective(model, mix, 0.9)[0],
             lambda: domain_objective(model, mix, 0.9, backward_to="shared"),
             model.disc_params() + model.fs.params()),
            (lambda: rplr_loss(model, pse, backward=False)[0],
             lambda: rplr_loss(model, pse), model.main_params()),
            (lambda: main_objective(model, lab, mix, pse, 0.3, 0.7, 0.9, backward=False).combined,
             lambda: main_objective(model, lab, mix, pse, 0.3, 0.7, 0.9), model.main_params()),
        ]
        for value, backward, params in cases:
            with frozen_noise(*model.modules()):
                model.zero_grad()
                backward()
                worst = max(worst, grad_check(value, params).max_rel_err)
    return worst


def check_em(seeds: int = 5, pi: float = 0.7, std: float = 0.1, delta: float = 1.0) -> tuple[bool, str]:
    est = []
    for seed in range(seeds):
        _, d, _ = sample_distance_mixture(10_000, pi, std, delta, np.random.default_rng(seed))
        p = em_fit(d, np.zeros(len(d), dtype=int), 1, make_rng(seed, "mirror"), mode="moment").params
        est.append((p.pi[0], math.sqrt(p.sigma[0]), p.delta[0]))
    got = np.mean(est, axis=0)
    rel = np.abs(got - [pi, std, delta]) / [pi, std, delta]
    return bool((rel < 0.1).all()), "pi={:.3f} std={:.3f} delta={:.3f}".format(*got)


def _search_center(points: np.ndarray) -> np.ndarray:
    """Direction minimizing mean cosine distance by coarse-to-fine angle grids."""
    def cost(dirs):
        return 1.0 - (dirs @ points.T).mean(axis=1)

    if points.shape[1] == 2:
        lo, hi = 0.0, 2 * math.pi
        for _ in range(4):
            a = np.linspace(lo, hi, 400)
            best = a[np.argmin(cost(np.stack([np.cos(a), np.sin(a)], 1)))]
            step = (hi - lo) / 399
            lo, hi = best - 2 * step, best + 2 * step
        return np.array([math.cos(best), math.sin(best)])
    t_lo, t_hi, p_lo, p_hi = 0.0, math.pi, -math.pi, math.pi
    for _ in range(5):
        t, p = np.meshgrid(np.linspace(t_lo, t_hi, 120), np.linspace(p_lo, p_hi, 120))
        dirs = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], -1).reshape(-1, 3)
        i = int(np.argmin(cost(dirs)))
        bt, bp = t.ravel()[i], p.ravel()[i]
        dt, dp = (t_hi - t_lo) / 119, (p_hi - p_lo) / 119
        t_lo, t_hi = max(0.0, bt - 2 * dt), min(math.pi, bt + 2 * dt)
        p_lo, p_hi = bp - 2 * dp, bp + 2 * dp
    return dirs[i]


def check_centers(n_sets: int = 100, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for dim in (2, 3):
        for _ in range(n_sets):
            n = int(rng.integers(2, 40))
            pts = normalize_to_sphere(rng.standard_normal(dim) + rng.standard_normal((n, dim)) * 0.8)
            if np.linalg.norm(pts.sum(0)) < 1e-3:
                continue
            c = class_centers(pts, np.zeros(n, dtype=int), 1).centers[0]
            worst = max(worst, math.acos(min(1.0, float(c @ _search_center(pts)))))
    return worst < 1e-3, f"max angle {worst:.2e} rad"


def run_selfcheck(seeds: int = 10, mutation: str | None = None) -> SelfCheckReport:
    if mutation is not None and mutation not in MUTATIONS:
        raise ValueError(f"unknown mutation {mutation!r}; choose from {MUTATIONS}")
    report = SelfCheckReport()
    ctx = _sign_flip() if mutation == "stochastic_sign" else contextlib.nullcontext()
    with ctx:
        for name, fn in (("layer_gradients", check_layers), ("objective_gradients", check_objectives)):
            t0 = time.perf_counter()
            err = fn(seeds)
            report.results.append(CheckResult(name, err < GRAD_TOL, f"max rel err {err:.2e}",
                                              time.perf_counter() - t0))
        for name, fn in (("em_recovery", check_em), ("sphere_centers", check_centers)):
            t0 = time.perf_counter()
            ok, detail = fn()
            report.results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return report
