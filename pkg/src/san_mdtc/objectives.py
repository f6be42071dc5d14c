"""Loss terms of the adversarial objective.

Reduction convention everywhere: mean over the examples of a single-domain
batch, summed across domains.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .model import MDTCModel
from .nn_core import nll_loss

log = logging.getLogger(__name__)


@dataclass
class LabeledBatch:
    domain: int
    x: object
    y: np.ndarray


@dataclass
class DomainBatch:
    domain: int
    x: object


@dataclass
class PseudoBatch:
    domain: int
    x: object
    y_hat: np.ndarray
    w: np.ndarray


@dataclass
class LossBreakdown:
    j_c: float = 0.0
    j_d_els: float = 0.0
    j_rplr: float = 0.0
    combined: float = 0.0
    lam: float = 0.0
    lam_rplr: float = 0.0
    per_domain: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return asdict(self)


def off_domain_mass(num_domains: int, gamma: float) -> float:
    """``(1-gamma)/(M-1)`` evaluated in decimal arithmetic on the configured
    value of ``gamma`` and rounded once, so 0.9 over three domains gives 0.05
    rather than 0.04999999999999999."""
    if num_domains < 2:
        raise ConfigError("domain label smoothing needs at least two domains")
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
    return float((Decimal(1) - Decimal(repr(float(gamma)))) / Decimal(int(num_domains) - 1))


def smoothed_domain_target(num_domains: int, true_domain: int, gamma: float) -> np.ndarray:
    """``gamma`` on the true domain, ``(1-gamma)/(M-1)`` on every other one."""
    other = off_domain_mass(num_domains, gamma)
    if not 0 <= true_domain < num_domains:
        raise ConfigError(f"domain {true_domain} outside [0, {num_domains})")
    t = np.full(num_domains, other)
    t[true_domain] = gamma
    return t


def domain_targets(num_domains: int, domains, gamma: float | None) -> np.ndarray:
    """Row-wise targets; ``gamma=None`` gives plain one-hot labels."""
    domains = np.asarray(domains, dtype=np.int64)
    if gamma is None:
        if num_domains < 2:
            raise ConfigError("adversarial alignment needs at least two domains")
        t = np.zeros((len(domains), num_domains))
        t[np.arange(len(domains)), domains] = 1.0
        return t
    return np.stack([smoothed_domain_target(num_domains, int(d), gamma) for d in domains]) \
        if len(domains) else np.zeros((0, num_domains))


def _check_log_probs(log_probs: np.ndarray, tol: float = 1e-6) -> None:
    lse = np.logaddexp.reduce(log_probs, axis=1)
    if log_probs.size and np.abs(lse).max() > tol:
        raise NumericError(f"log-probability rows not normalized (max |logsumexp| = {np.abs(lse).max():.3g})")


def dls_objective(log_probs: np.ndarray, domains, gamma: float | None) -> tuple[float, np.ndarray]:
    """Smoothed domain log-likelihood, batch mean, and its gradient w.r.t. ``log_probs``.

    Written term by term: ``gamma*log D_i + (1-gamma)/(M-1) * sum_{j!=i} log D_j``.
    """
    _check_log_probs(log_probs)
    n, m = log_probs.shape
    domains = np.asarray(domains, dtype=np.int64)
    if n == 0:
        return 0.0, np.zeros_like(log_probs)
    if gamma is None:
        own_w, other_w = 1.0, 0.0
    else:
        own_w, other_w = gamma, off_domain_mass(m, gamma)
    rows = np.arange(n)
    own = log_probs[rows, domains]
    others = log_probs.sum(axis=1) - own
    value = float(np.mean(own_w * own + other_w * others))
    grad = np.full_like(log_probs, other_w / n)
    grad[rows, domains] = own_w / n
    return value, grad


def dls_cross_entropy(log_probs: np.ndarray, domains, gamma: float | None) -> float:
    """Same quantity as :func:`dls_objective` via the target matrix: minus the
    cross-entropy between smoothed targets and the discriminator output."""
    _check_log_probs(log_probs)
    if log_probs.shape[0] == 0:
        return 0.0
    t = domain_targets(log_probs.shape[1], domains, gamma)
    return float(np.mean((t * log_probs).sum(axis=1)))


def _check_weights(lam: float, lam_rplr: float) -> None:
    if lam < 0 or lam_rplr < 0:
        raise ConfigError(f"loss weights must be non-negative (lam={lam}, lam_rplr={lam_rplr})")


def classification_loss(model: MDTCModel, batches: Sequence[LabeledBatch], train: bool = True,
                        backward: bool = True, scale: float = 1.0) -> tuple[float, dict]:
    """Sum over domains of the mean NLL of the classifier on [shared, specific]."""
    total, per = 0.0, {}
    sd = model.arch.shared_dim
    for b in batches:
        if b.x.shape[0] == 0:
            log.warning("empty labeled batch for domain %d skipped", b.domain)
            continue
        shared = model.fs.forward(b.x, train)
        specific = model.specific_forward(b.x, b.domain, train)
        lp = model.clf.forward(np.concatenate([shared, specific], axis=1), train)
        loss, g = nll_loss(lp, b.y)
        total += loss
        per[b.domain] = loss
        if backward:
            g_cat = model.clf.backward(g * scale)
            model.fs.backward(g_cat[:, :sd])
            model.specific_backward(g_cat[:, sd:], b.domain)
    return total, per


def domain_objective(model: MDTCModel, batches: Sequence[DomainBatch], gamma: float | None,
                     train: bool = True, backward_to: str | None = None,
                     scale: float = 1.0) -> tuple[float, dict]:
    """Smoothed domain log-likelihood of the discriminator, summed over domains.

    ``backward_to="disc"`` accumulates ``scale * dJ`` into discriminator
    gradients only; ``backward_to="shared"`` continues into the shared
    extractor (discriminator gradients are accumulated too and must be
    discarded by the caller).
    """
    total, per = 0.0, {}
    for b in batches:
        if b.x.shape[0] == 0:
            continue
        shared = model.fs.forward(b.x, train)
        lp = model.disc.forward(shared, train)
        value, g = dls_objective(lp, np.full(b.x.shape[0], b.domain), gamma)
        total += value
        per[b.domain] = value
        if backward_to is not None:
            g_shared = model.disc.backward(g * scale)
            if backward_to == "shared":
                model.fs.backward(g_shared)
    return total, per


def rplr_loss(model: MDTCModel, batches: Sequence[PseudoBatch], train: bool = True,
              backward: bool = True, scale: float = 1.0) -> tuple[float, dict]:
    """Weighted pseudo-label NLL. Within a batch the mean runs over examples
    with positive weight; zero-weight examples are never forwarded."""
    total, per = 0.0, {}
    sd = model.arch.shared_dim
    for b in batches:
        n = b.x.shape[0]
        if len(b.y_hat) != n or len(b.w) != n:
            raise DataError(f"domain {b.domain}: {n} examples but {len(b.y_hat)} labels / {len(b.w)} weights")
        keep = np.flatnonzero(np.asarray(b.w) > 0)
        if keep.size == 0:
            continue
        x = b.x[keep]
        shared = model.fs.forward(x, train)
        specific = model.specific_forward(x, b.domain, train)
        lp = model.clf.forward(np.concatenate([shared, specific], axis=1), train)
        loss, g = nll_loss(lp, np.asarray(b.y_hat)[keep], weights=np.asarray(b.w)[keep])
        total += loss
        per[b.domain] = loss
        if backward:
            g_cat = model.clf.backward(g * scale)
            model.fs.backward(g_cat[:, :sd])
            model.specific_backward(g_cat[:, sd:], b.domain)
    return total, per


def combined_objective(parts: LossBreakdown, lam: float, lam_rplr: float, role: str) -> float:
    """Scalar each player descends: the discriminator descends ``-J_D``; the
    extractors and classifier descend ``J_C + lam*J_D + lam_rplr*J_rplr``."""
    _check_weights(lam, lam_rplr)
    if role == "discriminator":
        return -parts.j_d_els
    if role == "main":
        return parts.j_c + lam * parts.j_d_els + lam_rplr * parts.j_rplr
    raise ConfigError(f"unknown role {role!r}")


def main_objective(model: MDTCModel, labeled: Sequence[LabeledBatch],
                   mixed: Sequence[DomainBatch], pseudo: Sequence[PseudoBatch],
                   lam: float, lam_rplr: float, gamma: float | None,
                   train: bool = True, backward: bool = True) -> LossBreakdown:
    """Evaluate (and optionally back-propagate) the extractor/classifier side.

    Gradients land in ``model.main_params()``; discriminator gradients touched
    along the way are left for the caller to zero.
    """
    _check_weights(lam, lam_rplr)
    out = LossBreakdown(lam=lam, lam_rplr=lam_rplr)
    out.j_c, per_c = classification_loss(model, labeled, train, backward)
    if lam > 0 and mixed:
        out.j_d_els, per_d = domain_objective(model, mixed, gamma, train,
                                              "shared" if backward else None, scale=lam)
    else:
        per_d = {}
    if lam_rplr > 0 and pseudo:
        out.j_rplr, per_r = rplr_loss(model, pseudo, train, backward, scale=lam_rplr)
    else:
        per_r = {}
    out.per_domain = {"j_c": per_c, "j_d_els": per_d, "j_rplr": per_r}
    out.combined = combined_objective(out, lam, lam_rplr, "main")
    return out
