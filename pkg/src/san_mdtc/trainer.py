"""Alternating adversarial training: an initialization phase without the
pseudo-label term, then rounds of (pseudo-label/mixture estimation with
frozen networks; one epoch of network updates on the full objective)."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .config import TrainConfig
from .data import DomainDataset
from .errors import ConfigError, DataError, SanError
from .model import (Architecture, MDTCModel, build_model, extract_features, predict_log_probs,
                    save_checkpoint)
from .nn_core import Adam, make_rng
from .objectives import (DomainBatch, LabeledBatch, LossBreakdown, PseudoBatch, domain_objective,
                         main_objective)
from .rplr import MixtureParams, PseudoLabels, estimate_pseudo_labels

log = logging.getLogger(__name__)


class TrainingAborted(SanError, RuntimeError):
    pass


def _vstack(a, b):
    if sp.issparse(a) or sp.issparse(b):
        return sp.vstack([sp.csr_matrix(a), sp.csr_matrix(b)], format="csr")
    return np.vstack([a, b])


class BatchStream:
    """Endless reshuffled index stream over ``n`` rows."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self.n == 0:
            return np.zeros(0, dtype=np.int64)
        out = []
        need = self.batch_size
        while need:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            take = self._order[self._pos:self._pos + need]
            out.append(take)
            self._pos += len(take)
            need -= len(take)
        return np.concatenate(out)


@dataclass
class DomainData:
    """Training view of one domain: inputs and visible labels only."""

    index: int
    name: str
    x_lab: object
    y_lab: np.ndarray
    x_unl: object
    x_pool: object


def resolve_target(datasets: Sequence[DomainDataset], target: str | None) -> int | None:
    if target is None:
        return None
    names = [d.name for d in datasets]
    if target in names:
        return names.index(target)
    try:
        idx = int(target)
    except ValueError:
        raise ConfigError(f"msuda target {target!r} is not a domain (have {names})") from None
    if not 0 <= idx < len(datasets):
        raise ConfigError(f"msuda target index {idx} outside [0, {len(datasets)})")
    return idx


def prepare(datasets: Sequence[DomainDataset], target: int | None = None) -> list[DomainData]:
    out = []
    for i, d in enumerate(datasets):
        x_lab, y_lab = d.labeled.x, d.labeled.y
        if i == target and len(y_lab):
            log.warning("domain %s is the adaptation target; its %d labels are ignored", d.name, len(y_lab))
            x_lab, y_lab = x_lab[:0], y_lab[:0]
        out.append(DomainData(i, d.name, x_lab, y_lab, d.unlabeled.x, _vstack(x_lab, d.unlabeled.x)))
    dims = {d.x_pool.shape[1] for d in out}
    if len(dims) != 1:
        raise DataError(f"domains disagree on input dimension: {sorted(dims)}")
    if not any(len(d.y_lab) for d in out):
        raise DataError("no labeled examples in any domain")
    return out


@dataclass
class EpochMetrics:
    epoch: int
    phase: str
    per_domain_acc: dict
    avg_acc: float
    per_domain_dev: dict | None
    avg_dev: float | None
    losses: dict
    n_pseudo: int = 0
    n_valid_pseudo: int = 0
    pseudo_acc: float | None = None
    valid_pseudo_acc: float | None = None
    target_acc: float | None = None
    epoch_seconds: float = 0.0

    def to_record(self) -> dict:
        """Deterministic part of the record (wall time goes elsewhere)."""
        rec = {"type": "epoch"}
        rec.update({k: v for k, v in self.__dict__.items() if k != "epoch_seconds"})
        return rec


@dataclass
class EvalResult:
    per_domain: dict
    avg: float
    ablation: str = "none"


@dataclass
class TrainState:
    config: TrainConfig
    model: MDTCModel
    main_opt: Adam
    disc_opt: Adam
    streams: dict
    epoch: int = 0
    round: int = 0
    pseudo: PseudoLabels | None = None
    timings: dict = field(default_factory=lambda: {"init": [], "main": [], "estimate": [], "eval": []})


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[EpochMetrics]
    best_epoch: int
    best_state: dict
    domain_names: list[str]

    @property
    def model(self) -> MDTCModel:
        return self.state.model


def new_state(cfg: TrainConfig, data: Sequence[DomainData], num_classes: int) -> TrainState:
    cfg.validate()
    arch = Architecture(input_dim=data[0].x_pool.shape[1], num_classes=num_classes,
                        num_domains=len(data), hidden=tuple(cfg.hidden), shared_dim=cfg.shared_dim,
                        specific_dim=cfg.specific_dim, dropout=cfg.dropout, logvar_init=cfg.logvar_init)
    model = build_model(cfg.mode, arch, cfg.seed)
    bs = cfg.batch_size
    streams = {}
    for d in data:
        i = d.index
        streams[("lab", i)] = BatchStream(len(d.y_lab), bs, make_rng(cfg.seed, f"batch.labeled.{i}"))
        streams[("mix", i)] = BatchStream(d.x_pool.shape[0], bs, make_rng(cfg.seed, f"batch.mixed.{i}"))
        streams[("pse", i)] = BatchStream(d.x_unl.shape[0], bs, make_rng(cfg.seed, f"batch.pseudo.{i}"))
    return TrainState(cfg, model, Adam(model.main_params(), lr=cfg.lr),
                      Adam(model.disc_params(), lr=cfg.lr), streams)


def iterations_per_epoch(data: Sequence[DomainData], batch_size: int) -> int:
    return max(1, math.ceil(max(len(d.y_lab) for d in data) / batch_size))


def _mixed_batches(state: TrainState, data) -> list[DomainBatch]:
    return [DomainBatch(d.index, d.x_pool[state.streams[("mix", d.index)].next()]) for d in data]


def discriminator_step(state: TrainState, data) -> float:
    """One ascent step of the discriminator on the smoothed domain log-likelihood."""
    model = state.model
    for p in model.disc_params():
        p.zero_grad()
    value, _ = domain_objective(model, _mixed_batches(state, data), state.config.dls_gamma,
                                train=True, backward_to="disc", scale=-1.0)
    state.disc_opt.step()
    return value


def main_step(state: TrainState, data, use_rplr: bool) -> LossBreakdown:
    cfg, model = state.config, state.model
    labeled = []
    for d in data:
        if len(d.y_lab):
            idx = state.streams[("lab", d.index)].next()
            labeled.append(LabeledBatch(d.index, d.x_lab[idx], d.y_lab[idx]))
    mixed = _mixed_batches(state, data) if cfg.lam > 0 else []
    pseudo = []
    lam_rplr = cfg.lam_rplr if use_rplr else 0.0
    if lam_rplr > 0 and state.pseudo is not None:
        for d in data:
            rec = state.pseudo.by_domain.get(d.index)
            if rec is None or len(rec) == 0:
                continue
            idx = state.streams[("pse", d.index)].next()
            pseudo.append(PseudoBatch(d.index, d.x_unl[idx], rec.y_hat[idx], rec.w[idx]))
    model.zero_grad()
    parts = main_objective(model, labeled, mixed, pseudo, cfg.lam, lam_rplr, cfg.dls_gamma,
                           train=True, backward=True)
    state.main_opt.step()
    for p in model.disc_params():
        p.zero_grad()
    if hasattr(model, "clamp_logvar"):
        model.clamp_logvar()
    return parts


def run_epoch(state: TrainState, data, use_rplr: bool) -> dict:
    cfg = state.config
    sums = {"j_c": 0.0, "j_d_els": 0.0, "j_rplr": 0.0, "combined": 0.0, "disc_j_d": 0.0}
    n_iter = iterations_per_epoch(data, cfg.batch_size)
    n_disc = 0
    for _ in range(n_iter):
        for _ in range(cfg.n_critic):
            sums["disc_j_d"] += discriminator_step(state, data)
            n_disc += 1
        parts = main_step(state, data, use_rplr)
        sums["j_c"] += parts.j_c
        sums["j_d_els"] += parts.j_d_els
        sums["j_rplr"] += parts.j_rplr
        sums["combined"] += parts.combined
    out = {k: v / n_iter for k, v in sums.items() if k != "disc_j_d"}
    out["disc_j_d"] = sums["disc_j_d"] / n_disc if n_disc else None
    out["lam"] = cfg.lam
    out["lam_rplr"] = cfg.lam_rplr if use_rplr else 0.0
    state.epoch += 1
    return out


def init_phase(state: TrainState, data, epochs: int | None = None) -> list[dict]:
    epochs = state.config.init_epochs if epochs is None else epochs
    return [run_epoch(state, data, use_rplr=False) for _ in range(epochs)]


def estimate_phi_step(state: TrainState, data) -> PseudoLabels:
    """Pseudo-labels, distances, mixture parameters and weights for every
    unlabeled pool. Network parameters are not modified."""
    cfg = state.config
    state.round += 1
    labeled = {d.index: (d.x_lab, d.y_lab) for d in data if len(d.y_lab)}
    unlabeled = {d.index: d.x_unl for d in data if d.x_unl.shape[0]}
    num_classes = state.model.arch.num_classes
    if not unlabeled:
        pl = PseudoLabels({}, MixtureParams.prior(num_classes), None)
    else:
        pl = estimate_pseudo_labels(state.model, labeled, unlabeled, num_classes,
                                    make_rng(cfg.seed, f"mirror.{state.round}"), radius=cfg.radius,
                                    iters=cfg.em_iters, tol=cfg.em_tol, mode=cfg.em_mode,
                                    min_samples=cfg.em_min_samples,
                                    uniform_support=cfg.em_uniform_support)
    state.pseudo = pl
    return pl


def optimize_step(state: TrainState, data) -> dict:
    if state.pseudo is None:
        raise ConfigError("optimize_step needs pseudo-labels; run estimate_phi_step first")
    return run_epoch(state, data, use_rplr=True)


# --- evaluation -------------------------------------------------------------------

def _split(d: DomainDataset, split: str):
    s = getattr(d, split)
    return s if s is not None and len(s) else None


def evaluate(model: MDTCModel, datasets: Sequence[DomainDataset], ablation: str = "none",
             split: str = "test", seed: int = 0) -> EvalResult:
    """Mean-mode accuracy per domain. ``zero`` blanks the domain-specific half
    of the classifier input; ``shuffle`` swaps in the specific features of a
    random example from a different domain."""
    if ablation not in ("none", "zero", "shuffle"):
        raise ConfigError(f"unknown ablation {ablation!r}")
    feats, ys = {}, {}
    for i, d in enumerate(datasets):
        s = _split(d, split)
        if s is not None:
            feats[i] = extract_features(model, s.x, i)
            ys[i] = s.y
    if ablation == "shuffle" and len(feats) < 2:
        raise ConfigError("shuffle ablation needs at least two evaluated domains")
    rng = make_rng(seed, "eval.shuffle")
    per = {}
    for i in sorted(feats):
        shared, specific = feats[i].shared, feats[i].specific
        if ablation == "zero":
            specific = np.zeros_like(specific)
        elif ablation == "shuffle":
            others = [j for j in sorted(feats) if j != i]
            src = rng.choice(others, size=len(shared))
            specific = np.empty_like(specific)
            for j in others:
                rows = np.flatnonzero(src == j)
                specific[rows] = feats[j].specific[rng.integers(0, len(feats[j].specific), size=len(rows))]
        lp = predict_log_probs(model, np.concatenate([shared, specific], axis=1))
        per[datasets[i].name] = float(np.mean(np.argmax(lp, axis=1) == ys[i]))
    avg = float(np.mean(list(per.values()))) if per else float("nan")
    return EvalResult(per, avg, ablation)


def pseudo_label_accuracy(pl: PseudoLabels | None, datasets: Sequence[DomainDataset]):
    """(overall, valid-only) pseudo-label accuracy against hidden gold labels,
    or ``(None, None)`` when no gold labels exist."""
    if pl is None:
        return None, None
    hit_all = n_all = hit_v = n_v = 0
    for dom, rec in pl.by_domain.items():
        gold = datasets[dom].hidden_gold()
        if gold is None:
            continue
        correct = rec.y_hat == gold
        hit_all += int(correct.sum())
        n_all += len(correct)
        valid = rec.w > 0
        hit_v += int(correct[valid].sum())
        n_v += int(valid.sum())
    return (hit_all / n_all if n_all else None), (hit_v / n_v if n_v else None)


# --- driver -----------------------------------------------------------------------

def _dump(rec: dict) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {str(k): clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, np.generic):
            return clean(v.item())
        return v
    return json.dumps(clean(rec), sort_keys=True)


def train(cfg: TrainConfig, datasets: Sequence[DomainDataset], out_dir=None,
          header_extra: dict | None = None,
          on_epoch: Callable[[EpochMetrics], None] | None = None) -> TrainResult:
    """Full schedule with per-epoch evaluation and best-dev checkpointing.

    With ``out_dir`` the run writes ``metrics.jsonl`` (header then one record
    per epoch), ``timing.jsonl`` (wall-clock per epoch), ``best.npz`` and
    ``last.npz``. Any error aborts the run; files already written stay.
    """
    cfg.validate()
    target = resolve_target(datasets, cfg.msuda_target)
    data = prepare(datasets, target)
    if len(data) < 2 and cfg.dls:
        raise ConfigError("domain label smoothing needs at least two domains; set dls=false")
    num_classes = max(d.num_classes for d in datasets)
    state = new_state(cfg, data, num_classes)
    names = [d.name for d in datasets]
    has_dev = any(_split(d, "dev") is not None for d in datasets)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = timing_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
        timing_fh = open(out / "timing.jsonl", "w")
        header = {"type": "header", "config": cfg.to_dict(), "domains": names,
                  "num_classes": num_classes, "msuda_target": None if target is None else names[target],
                  "param_count": state.model.param_count(), **(header_extra or {})}
        metrics_fh.write(_dump(header) + "\n")
    metrics: list[EpochMetrics] = []
    best_score, best_epoch, best_state = -math.inf, 0, state.model.state_dict()
    total = cfg.init_epochs + cfg.main_epochs
    try:
        for ep in range(1, total + 1):
            phase = "init" if ep <= cfg.init_epochs else "main"
            t0 = time.perf_counter()
            if phase == "main":
                estimate_phi_step(state, data)
                t1 = time.perf_counter()
                state.timings["estimate"].append(t1 - t0)
                losses = optimize_step(state, data)
            else:
                t1 = t0
                losses = run_epoch(state, data, use_rplr=False)
            t2 = time.perf_counter()
            state.timings[phase].append(t2 - t1)
            m = _epoch_metrics(state, datasets, ep, phase, losses, target)
            t3 = time.perf_counter()
            state.timings["eval"].append(t3 - t2)
            m.epoch_seconds = t2 - t0
            metrics.append(m)
            score = m.avg_dev if has_dev else None
            if (score is not None and score > best_score) or (not has_dev):
                best_score = score if score is not None else best_score
                best_epoch, best_state = ep, state.model.state_dict()
                if out is not None:
                    save_checkpoint(out / "best.npz", state.model, cfg.to_dict(),
                                    {"epoch": ep, "domains": names})
            if metrics_fh is not None:
                metrics_fh.write(_dump(m.to_record()) + "\n")
                metrics_fh.flush()
                timing_fh.write(json.dumps({"epoch": ep, "phase": phase,
                                            "epoch_seconds": m.epoch_seconds,
                                            "eval_seconds": t3 - t2}) + "\n")
                timing_fh.flush()
            if on_epoch is not None:
                on_epoch(m)
        if out is not None:
            save_checkpoint(out / "last.npz", state.model, cfg.to_dict(),
                            {"epoch": state.epoch, "domains": names})
    except SanError as exc:
        raise TrainingAborted(f"training aborted at epoch {state.epoch + 1}: {exc}") from exc
    except FloatingPointError as exc:
        raise TrainingAborted(f"training aborted at epoch {state.epoch + 1}: {exc}") from exc
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
            timing_fh.close()
    return TrainResult(state, metrics, best_epoch, best_state, names)


def _epoch_metrics(state: TrainState, datasets, epoch: int, phase: str, losses: dict,
                   target: int | None) -> EpochMetrics:
    model = state.model
    test = evaluate(model, datasets, "none", "test", state.config.seed)
    dev = None
    if any(_split(d, "dev") is not None for d in datasets):
        dev = evaluate(model, datasets, "none", "dev", state.config.seed)
    m = EpochMetrics(epoch, phase, test.per_domain, test.avg,
                     dev.per_domain if dev else None, dev.avg if dev else None, losses)
    if phase == "main" and state.pseudo is not None:
        m.n_pseudo = int(sum(len(r) for r in state.pseudo.by_domain.values()))
        m.n_valid_pseudo = state.pseudo.n_valid()
        m.pseudo_acc, m.valid_pseudo_acc = pseudo_label_accuracy(state.pseudo, datasets)
    if target is not None:
        m.target_acc = test.per_domain.get(datasets[target].name)
    return m


def best_model(result: TrainResult) -> MDTCModel:
    """The training model with the best-checkpoint weights loaded."""
    result.model.load_state_dict(result.best_state)
    return result.model


# --- efficiency -------------------------------------------------------------------

@dataclass
class RuntimeReport:
    san_seconds: float
    shared_private_seconds: float
    san_specific_params: int
    shared_private_specific_params: int

    @property
    def ratio(self) -> float:
        return self.san_seconds / self.shared_private_seconds

    def table(self) -> str:
        rows = ["mode\tmean_epoch_seconds\tspecific_params",
                f"san\t{self.san_seconds:.3f}\t{self.san_specific_params}",
                f"shared_private\t{self.shared_private_seconds:.3f}\t{self.shared_private_specific_params}",
                f"ratio\t{self.ratio:.3f}\t"]
        return "\n".join(rows)


def runtime_report(state: TrainState) -> dict:
    """Mean wall-clock seconds per epoch for each phase that ran."""
    return {k: float(np.mean(v)) for k, v in state.timings.items() if v}


def runtime_compare(cfg: TrainConfig, datasets: Sequence[DomainDataset], epochs: int = 2,
                    repeats: int = 1) -> RuntimeReport:
    """Train both modes under one config for ``epochs`` initialization epochs
    and compare mean epoch time (``repeats`` alternating runs each)."""
    base = cfg.replace(init_epochs=epochs, main_epochs=0)
    times = {"san": [], "shared_private": []}
    params = {}
    data = prepare(datasets, resolve_target(datasets, cfg.msuda_target))
    num_classes = max(d.num_classes for d in datasets)
    for _ in range(repeats):
        for mode in ("shared_private", "san"):
            state = new_state(base.replace(mode=mode), data, num_classes)
            for _ in range(epochs):
                t0 = time.perf_counter()
                run_epoch(state, data, use_rplr=False)
                times[mode].append(time.perf_counter() - t0)
            params[mode] = state.model.param_count()["F_d"]
    return RuntimeReport(float(np.mean(times["san"])), float(np.mean(times["shared_private"])),
                         params["san"], params["shared_private"])
