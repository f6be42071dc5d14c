"""Robust pseudo-labels: spherical class centers, cosine distances, a
Gaussian-uniform mixture over distances fitted by EM, and the resulting
per-example weights."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, NormalizationError

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
PI_FLOOR = 0.01
SIGMA_FLOOR = 1e-6
DELTA_FLOOR = 1e-4
VAR_FLOOR = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


def normalize_to_sphere(f: np.ndarray, radius: float = 1.0, ids: Sequence | None = None) -> np.ndarray:
    """Project a vector (or each row of a matrix) onto the sphere of ``radius``."""
    f = np.asarray(f, dtype=float)
    single = f.ndim == 1
    rows = f[None, :] if single else f
    norms = np.linalg.norm(rows, axis=1)
    bad = np.flatnonzero(norms <= NORM_EPS)
    if bad.size:
        who = ids[bad[0]] if ids is not None else int(bad[0])
        raise NormalizationError(f"cannot normalize near-zero feature vector (example {who})")
    out = radius * rows / norms[:, None]
    return out[0] if single else out


@dataclass
class SphericalCenters:
    radius: float
    centers: np.ndarray  # (K, n); rows of absent classes are NaN
    present: np.ndarray  # (K,) bool
    counts: np.ndarray  # (K,) int

    @property
    def num_classes(self) -> int:
        return len(self.present)


def class_centers(features: np.ndarray, labels, num_classes: int, radius: float = 1.0) -> SphericalCenters:
    """Per class, the point of the sphere closest (in mean cosine distance) to
    the members: ``r * s / ||s||`` with ``s`` the sum of member vectors."""
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels outside [0, {num_classes})")
    dim = features.shape[1]
    centers = np.full((num_classes, dim), np.nan)
    present = np.zeros(num_classes, dtype=bool)
    counts = np.bincount(labels, minlength=num_classes)
    for k in range(num_classes):
        if counts[k] == 0:
            continue
        s = features[labels == k].sum(axis=0)
        norm = np.linalg.norm(s)
        if norm < NORM_EPS:
            raise NormalizationError(f"class {k}: member vectors cancel out, center undefined")
        centers[k] = radius * s / norm
        present[k] = True
    return SphericalCenters(radius, centers, present, counts)


def cosine_distance(f: np.ndarray, c: np.ndarray) -> float:
    nf, nc = np.linalg.norm(f), np.linalg.norm(c)
    if nf <= NORM_EPS or nc <= NORM_EPS:
        raise NormalizationError("cosine distance of a zero vector")
    return float(1.0 - np.dot(f, c) / (nf * nc))


def cosine_distances_to(features: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Row-wise ``1 - cos(f_i, centers_i)``, clipped to [0, 2]."""
    nf = np.linalg.norm(features, axis=1)
    nc = np.linalg.norm(centers, axis=1)
    if (nf <= NORM_EPS).any() or (nc <= NORM_EPS).any():
        raise NormalizationError("cosine distance of a zero vector")
    cos = np.einsum("ij,ij->i", features, centers) / (nf * nc)
    return np.clip(1.0 - cos, 0.0, 2.0)


# --- Gaussian-uniform mixture -------------------------------------------------

@dataclass
class MixtureParams:
    """Per-class inlier weight ``pi``, Gaussian variance ``sigma`` and uniform
    bound ``delta``."""

    pi: np.ndarray
    sigma: np.ndarray
    delta: np.ndarray

    @classmethod
    def prior(cls, num_classes: int) -> "MixtureParams":
        return cls(np.full(num_classes, 0.5), np.full(num_classes, 0.01), np.full(num_classes, 2.0))

    @property
    def num_classes(self) -> int:
        return len(self.pi)

    def copy(self) -> "MixtureParams":
        return MixtureParams(self.pi.copy(), self.sigma.copy(), self.delta.copy())

    def to_dict(self) -> dict:
        return {str(k): {"pi": float(self.pi[k]), "sigma": float(self.sigma[k]),
                         "delta": float(self.delta[k])} for k in range(self.num_classes)}


def half_normal_pdf(d, sigma):
    d = np.asarray(d, dtype=float)
    return np.where(d >= 0, 2.0 / np.sqrt(2.0 * np.pi * sigma) * np.exp(-d * d / (2.0 * sigma)), 0.0)


def mixture_density(d, k, phi: MixtureParams):
    """``(p_total, pi*N+)`` of distance(s) ``d`` under class ``k``'s mixture."""
    d = np.asarray(d, dtype=float)
    pi, sigma, delta = phi.pi[k], phi.sigma[k], phi.delta[k]
    inlier = pi * half_normal_pdf(d, sigma)
    uniform = np.where((d >= 0) & (d <= delta), 1.0 / delta, 0.0)
    return inlier + (1.0 - pi) * uniform, inlier


def posterior_beta(d, k, phi: MixtureParams, uniform_support: bool = False):
    """Probability that a pseudo-label at distance ``d`` is correct.

    Computed as a log-odds so neither component underflows. By default the
    outlier component contributes its density ``1/delta`` at every distance,
    matching the EM fit; with ``uniform_support=True`` it vanishes beyond
    ``delta`` and such points get probability 1.
    """
    d = np.asarray(d, dtype=float)
    pi, sigma, delta = phi.pi[k], phi.sigma[k], phi.delta[k]
    log_in = np.log(pi) + math.log(2.0) - 0.5 * (LOG_2PI + np.log(sigma)) - d * d / (2.0 * sigma)
    log_out = np.log1p(-pi) - np.log(delta)
    beta = expit(log_in - log_out)
    if uniform_support:
        beta = np.where(d > delta, 1.0, beta)
    return np.clip(beta, 0.0, 1.0)


def estep_beta(d_tilde, pi, sigma, delta, uniform_support: bool = False):
    """E-step responsibility on mirrored distances: full Gaussian against a
    uniform of density ``1/(2*delta)``."""
    d_tilde = np.asarray(d_tilde, dtype=float)
    g = pi * np.exp(-d_tilde ** 2 / (2.0 * sigma)) / np.sqrt(2.0 * np.pi * sigma)
    u = (1.0 - pi) / (2.0 * delta)
    if uniform_support:
        u = np.where(np.abs(d_tilde) <= delta, u, 0.0)
    with np.errstate(invalid="ignore"):
        beta = g / (g + u)
    # both densities underflowed: decide in log space
    bad = ~np.isfinite(beta)
    if bad.any():
        log_g = np.log(pi) - 0.5 * (LOG_2PI + np.log(sigma)) - d_tilde[bad] ** 2 / (2.0 * sigma)
        log_u = np.log1p(-pi) - np.log(2.0 * delta)
        beta[bad] = expit(log_g - log_u)
        if uniform_support:
            beta[bad & (np.abs(d_tilde) > delta)] = 1.0
    return beta


def mirrored_loglik(d_tilde, pi, sigma, delta, uniform_support: bool = False) -> float:
    """Observed-data log-likelihood of mirrored distances under the same
    component densities the E-step uses."""
    d_tilde = np.asarray(d_tilde, dtype=float)
    log_g = np.log(pi) - 0.5 * (LOG_2PI + np.log(sigma)) - d_tilde ** 2 / (2.0 * sigma)
    log_u = np.full_like(d_tilde, np.log1p(-pi) - np.log(2.0 * delta))
    if uniform_support:
        log_u[np.abs(d_tilde) > delta] = -np.inf
    return float(np.logaddexp(log_g, log_u).sum())


@dataclass
class MirroredSample:
    d_tilde: np.ndarray
    m: np.ndarray


def mirror(d, rng: np.random.Generator) -> MirroredSample:
    d = np.asarray(d, dtype=float)
    m = rng.integers(0, 2, size=d.shape)
    return MirroredSample(np.where(m == 1, -d, d), m)


@dataclass
class EMResult:
    params: MixtureParams
    iterations: int
    max_delta: float
    loglik: dict = field(default_factory=dict)
    fitted: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"classes": self.params.to_dict(), "iterations": self.iterations,
                "max_delta": self.max_delta,
                "fitted": [bool(v) for v in self.fitted] if self.fitted is not None else None}


def _fit_one(d_t: np.ndarray, iters: int, tol: float, mode: str, support: bool):
    pi = 0.5
    sigma = max(float(np.mean(d_t ** 2)), SIGMA_FLOOR)
    delta = max(float(np.max(np.abs(d_t))), DELTA_FLOOR)
    lls = [mirrored_loglik(d_t, pi, sigma, delta, support)]
    change, it = math.inf, 0
    for it in range(1, iters + 1):
        beta = estep_beta(d_t, pi, sigma, delta, support)
        sb = beta.sum()
        new_pi = float(np.clip(beta.mean(), PI_FLOOR, 1.0 - PI_FLOOR))
        new_sigma = float(np.sum(beta * d_t ** 2) / sb) if sb > 0 else sigma
        new_sigma = max(new_sigma, SIGMA_FLOOR)
        out_w = 1.0 - beta
        if mode == "paper":
            wts = out_w / (1.0 - new_pi)
            norm = sb
        else:
            wts = out_w
            norm = out_w.sum()
        if norm > 0:
            q1 = float(np.sum(wts * d_t) / norm)
            q2 = float(np.sum(wts * d_t ** 2) / norm)
            new_delta = math.sqrt(3.0 * max(q2 - q1 * q1, VAR_FLOOR))
        else:
            new_delta = delta
        new_delta = max(new_delta, DELTA_FLOOR)
        change = max(abs(new_pi - pi), abs(new_sigma - sigma), abs(new_delta - delta))
        pi, sigma, delta = new_pi, new_sigma, new_delta
        lls.append(mirrored_loglik(d_t, pi, sigma, delta, support))
        if change < tol:
            break
    return pi, sigma, delta, it, change, lls


def em_fit(d, y_hat, num_classes: int, rng: np.random.Generator, iters: int = 20,
           tol: float = 1e-5, mode: str = "paper", min_samples: int = 10,
           prior: MixtureParams | None = None, uniform_support: bool = False) -> EMResult:
    """Fit the per-class mixture to distances ``d`` grouped by pseudo-label.

    Signs are mirrored once per call. ``mode="paper"`` uses the outlier
    moment estimates with the inlier-mass normalizer; ``mode="moment"``
    normalizes by the outlier mass instead. ``uniform_support=True`` zeroes
    the outlier density beyond ``delta``; moment estimates of ``delta`` then
    tend to shrink below the data range and the fit can collapse.
    """
    if mode not in ("paper", "moment"):
        raise ConfigError(f"unknown EM mode {mode!r}")
    d = np.asarray(d, dtype=float)
    y_hat = np.asarray(y_hat, dtype=np.int64)
    if d.shape != y_hat.shape:
        raise DataError("distances and labels differ in length")
    if d.size and d.min() < 0:
        raise DataError("distances must be non-negative")
    params = (prior or MixtureParams.prior(num_classes)).copy()
    fitted = np.zeros(num_classes, dtype=bool)
    d_t = mirror(d, rng).d_tilde
    iterations, max_delta, lls = 0, 0.0, {}
    for k in range(num_classes):
        sel = y_hat == k
        n_k = int(sel.sum())
        if n_k < min_samples:
            if num_classes > 1 and d.size:
                log.warning("class %d has %d samples (< %d); keeping prior mixture", k, n_k, min_samples)
            continue
        pi, sigma, delta, it, change, ll = _fit_one(d_t[sel], iters, tol, mode, uniform_support)
        params.pi[k], params.sigma[k], params.delta[k] = pi, sigma, delta
        fitted[k] = True
        iterations = max(iterations, it)
        max_delta = max(max_delta, change)
        lls[k] = ll
    return EMResult(params, iterations, max_delta, lls, fitted)


def weight(beta):
    """Keep a pseudo-label only when its correctness posterior exceeds 0.5."""
    beta = np.asarray(beta, dtype=float)
    w = np.where(beta > 0.5, beta, 0.0)
    return float(w) if w.ndim == 0 else w


# --- pseudo-label records -------------------------------------------------------

@dataclass
class PseudoLabelRecord:
    id: int
    domain: int
    y_hat: int
    d: float
    beta: float
    w: float


@dataclass
class DomainPseudoLabels:
    """Columnar records for one domain's unlabeled pool, aligned with its rows."""

    domain: int
    y_hat: np.ndarray
    d: np.ndarray
    beta: np.ndarray
    w: np.ndarray
    has_center: np.ndarray

    def __len__(self):
        return len(self.y_hat)


@dataclass
class PseudoLabels:
    by_domain: dict[int, DomainPseudoLabels]
    phi: MixtureParams
    em: EMResult | None = None

    def records(self) -> Iterator[PseudoLabelRecord]:
        for dom in sorted(self.by_domain):
            p = self.by_domain[dom]
            for i in range(len(p)):
                yield PseudoLabelRecord(i, dom, int(p.y_hat[i]), float(p.d[i]), float(p.beta[i]), float(p.w[i]))

    def n_valid(self) -> int:
        return int(sum((p.w > 0).sum() for p in self.by_domain.values()))

    def write_csv(self, path, domain_names: Sequence[str] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "domain", "y_hat", "d", "beta", "w"])
            for r in self.records():
                name = domain_names[r.domain] if domain_names else r.domain
                w.writerow([r.id, name, r.y_hat, repr(r.d), repr(r.beta), repr(r.w)])


def assign_weights(d: np.ndarray, y_hat: np.ndarray, phi: MixtureParams,
                   uniform_support: bool = False) -> tuple[np.ndarray, np.ndarray]:
    beta = np.zeros(len(d))
    for k in np.unique(y_hat):
        sel = y_hat == k
        beta[sel] = posterior_beta(d[sel], int(k), phi, uniform_support)
    return beta, weight(beta)


def generate_pseudo_labels(model, labeled: dict, unlabeled: dict, num_classes: int,
                           radius: float = 1.0):
    """Pseudo-labels and center distances for every unlabeled pool.

    ``labeled`` maps domain -> (x, y) and ``unlabeled`` maps domain -> x.
    Features are the classifier input ``[shared, specific]`` with mean-mode
    stochastic weights. Centers come from the labeled examples of all domains.
    ``argmax`` breaks ties towards the lowest class index. Rows whose
    predicted class has no center get ``d = nan`` and ``has_center = False``.
    """
    from .model import extract_features, predict_log_probs

    feats, labels = [], []
    for dom in sorted(labeled):
        x, y = labeled[dom]
        if x.shape[0]:
            f = extract_features(model, x, dom).concat
            feats.append(normalize_to_sphere(f, radius))
            labels.append(np.asarray(y, dtype=np.int64))
    dim = model.arch.shared_dim + model.arch.specific_dim
    centers = class_centers(np.vstack(feats) if feats else np.zeros((0, dim)),
                            np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64),
                            num_classes, radius)
    out = {}
    for dom in sorted(unlabeled):
        x = unlabeled[dom]
        f = extract_features(model, x, dom).concat
        y_hat = np.argmax(predict_log_probs(model, f), axis=1) if len(f) else np.zeros(0, dtype=np.int64)
        has = centers.present[y_hat]
        d = np.full(len(y_hat), np.nan)
        if has.any():
            fs = normalize_to_sphere(f[has], radius)
            d[has] = cosine_distances_to(fs, centers.centers[y_hat[has]])
        out[dom] = (y_hat, d, has)
    return centers, out


def estimate_pseudo_labels(model, labeled: dict, unlabeled: dict, num_classes: int,
                           rng: np.random.Generator, radius: float = 1.0, iters: int = 20,
                           tol: float = 1e-5, mode: str = "paper", min_samples: int = 10,
                           uniform_support: bool = False) -> PseudoLabels:
    """One round of pseudo-labelling: distances, a mixture fit pooled over
    domains per class, and weights. Rows without a class center get ``w = 0``."""
    _, raw = generate_pseudo_labels(model, labeled, unlabeled, num_classes, radius)
    doms = sorted(raw)
    d_all = np.concatenate([raw[k][1][raw[k][2]] for k in doms]) if doms else np.zeros(0)
    y_all = np.concatenate([raw[k][0][raw[k][2]] for k in doms]) if doms else np.zeros(0, dtype=np.int64)
    em = em_fit(d_all, y_all, num_classes, rng, iters=iters, tol=tol, mode=mode,
                min_samples=min_samples, uniform_support=uniform_support)
    by_domain = {}
    for k in doms:
        y_hat, d, has = raw[k]
        beta = np.zeros(len(y_hat))
        if has.any():
            beta[has], _ = assign_weights(d[has], y_hat[has], em.params, uniform_support)
        w = np.where(has, weight(beta), 0.0)
        by_domain[k] = DomainPseudoLabels(k, y_hat, d, beta, w, has)
    return PseudoLabels(by_domain, em.params, em)
