"""Optimal transport dataset distance with Gaussian label costs and log-domain Sinkhorn."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, no_grad
from .core import pare_mix


class EstimationError(ValueError):
    pass


@dataclass
class FeatureDataset:
    features: np.ndarray  # M×D
    labels: np.ndarray  # M ints

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ContractError(f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels")
        if self.features.shape[0] == 0:
            raise ContractError("dataset is empty")

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)


@dataclass
class LabelGaussian:
    means: dict[int, np.ndarray]
    covs: dict[int, np.ndarray]


@dataclass
class OTDDResult:
    distance: float
    transport_plan: np.ndarray
    marginal_error: float
    iterations: int
    converged: bool
    debiased: bool = False
    error_history: list[float] | None = None


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def gaussian_w2_sq(mu1, cov1, mu2, cov2) -> float:
    """Squared 2-Wasserstein distance between two Gaussians (Bures form)."""
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    r2 = psd_sqrt(cov2)
    cross = psd_sqrt(r2 @ cov1 @ r2)
    bures = np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross)
    return float(np.sum((mu1 - mu2) ** 2) + max(bures, 0.0))


def fit_label_gaussians(d: FeatureDataset) -> LabelGaussian:
    """Per-class mean and covariance with a diagonal ridge of 1e-4 * trace / D."""
    D = d.features.shape[1]
    means, covs = {}, {}
    for c in d.classes:
        x = d.features[d.labels == c]
        if len(x) < 2:
            raise EstimationError(f"class {c} has {len(x)} sample(s); need >= 2 for a covariance")
        cov = np.cov(x, rowvar=False).reshape(D, D)
        rho = max(1e-4 * np.trace(cov) / D, 1e-12)
        means[int(c)] = x.mean(axis=0)
        covs[int(c)] = cov + rho * np.eye(D)
    return LabelGaussian(means, covs)


def label_distance_matrix(a: FeatureDataset, b: FeatureDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (W, classes_a, classes_b) with W[i, j] = W2^2 between class fits."""
    ga, gb = fit_label_gaussians(a), fit_label_gaussians(b)
    ca, cb = a.classes, b.classes
    W = np.empty((len(ca), len(cb)))
    for i, ci in enumerate(ca):
        for j, cj in enumerate(cb):
            W[i, j] = gaussian_w2_sq(ga.means[int(ci)], ga.covs[int(ci)], gb.means[int(cj)], gb.covs[int(cj)])
    return W, ca, cb


def ground_cost(a: FeatureDataset, b: FeatureDataset, label_matrix: np.ndarray | None = None,
                classes_a=None, classes_b=None) -> np.ndarray:
    """``|f_x - f_y|^2 + W[label_x, label_y]``; no label term when ``label_matrix`` is None."""
    fa, fb = a.features, b.features
    sq = (fa ** 2).sum(1)[:, None] + (fb ** 2).sum(1)[None, :] - 2.0 * fa @ fb.T
    cost = np.maximum(sq, 0.0)
    if label_matrix is not None:
        ca = a.classes if classes_a is None else np.asarray(classes_a)
        cb = b.classes if classes_b is None else np.asarray(classes_b)
        ia = np.searchsorted(ca, a.labels)
        ib = np.searchsorted(cb, b.labels)
        cost = cost + label_matrix[ia[:, None], ib[None, :]]
    return cost


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    # scipy.special.logsumexp is equivalent but its per-call overhead dominates this loop
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _sinkhorn_loop(neg, log_a, log_b, f, g, iters, tol, history):
    a = np.exp(log_a)
    err = np.inf
    for it in range(1, iters + 1):
        f = log_a - _lse(neg + g[None, :], 1)
        g = log_b - _lse(neg + f[:, None], 0)
        row = np.exp(f + _lse(neg + g[None, :], 1))
        err = float(np.abs(row - a).sum())
        if history is not None:
            history.append(err)
        if err <= tol:
            return f, g, err, it, True
    return f, g, err, iters, False


def sinkhorn(cost: np.ndarray, epsilon: float | None = None, max_iters: int = 2000,
             tol: float = 1e-6, track_history: bool = False, stage_iters: int = 100) -> OTDDResult:
    """Entropic OT between uniform marginals (log-domain iterations).

    ``epsilon`` defaults to ``0.1 * mean(cost)``. When ``epsilon`` is small
    relative to the cost range, the potentials are warm-started by halving
    epsilon from ``max(cost)`` (at most ``stage_iters`` iterations per stage);
    the final stage at ``epsilon`` runs up to ``max_iters`` iterations. Marginal
    error is the L1 row violation after each column update, and
    ``error_history`` covers the final stage only. Hitting ``max_iters`` sets
    ``converged=False`` instead of raising.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or not np.all(np.isfinite(cost)):
        raise ContractError("cost must be a finite 2-D matrix")
    if epsilon is None:
        epsilon = 0.1 * float(cost.mean())
        if epsilon <= 0:
            epsilon = 1.0
    if epsilon <= 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    m1, m2 = cost.shape
    log_a = np.full(m1, -np.log(m1))
    log_b = np.full(m2, -np.log(m2))
    f, g = np.zeros(m1), np.zeros(m2)
    total = 0

    eps = float(cost.max())
    while eps > 2 * epsilon:
        # potentials are carried in units of eps; rescale when eps changes
        f, g, _, it, _ = _sinkhorn_loop(-cost / eps, log_a, log_b, f, g, stage_iters, tol, None)
        total += it
        f, g = 2 * f, 2 * g
        eps /= 2
    if total:
        f, g = f * eps / epsilon, g * eps / epsilon

    history = [] if track_history else None
    neg = -cost / epsilon
    f, g, err, it, converged = _sinkhorn_loop(neg, log_a, log_b, f, g, max_iters, tol, history)
    plan = np.exp(neg + f[:, None] + g[None, :])
    return OTDDResult(float((plan * cost).sum()), plan, err, total + it, converged, False, history)


def _pair_cost(a: FeatureDataset, b: FeatureDataset, label_cost: bool) -> np.ndarray:
    if not label_cost:
        return ground_cost(a, b)
    W, ca, cb = label_distance_matrix(a, b)
    return ground_cost(a, b, W, ca, cb)


def otdd(a: FeatureDataset, b: FeatureDataset, epsilon: float | None = None, debias: bool = True,
         max_iters: int = 2000, tol: float = 1e-6, label_cost: bool = True) -> OTDDResult:
    """Dataset distance; debiased form is OT(a,b) - OT(a,a)/2 - OT(b,b)/2 at a shared epsilon.

    The cross term averages the solves on the cost and on its transpose, so
    swapping the arguments gives the same value regardless of where the
    iterations stopped.
    """
    cab = _pair_cost(a, b, label_cost)
    if epsilon is None:
        epsilon = 0.1 * float(cab.mean()) or 1.0
    res = sinkhorn(cab, epsilon, max_iters, tol)
    rev = sinkhorn(np.ascontiguousarray(cab.T), epsilon, max_iters, tol)
    res = OTDDResult(0.5 * (res.distance + rev.distance), res.transport_plan,
                     max(res.marginal_error, rev.marginal_error), res.iterations + rev.iterations,
                     res.converged and rev.converged)
    if not debias:
        return res
    raa = sinkhorn(_pair_cost(a, a, label_cost), epsilon, max_iters, tol)
    rbb = sinkhorn(_pair_cost(b, b, label_cost), epsilon, max_iters, tol)
    dist = res.distance - 0.5 * raa.distance - 0.5 * rbb.distance
    return OTDDResult(dist, res.transport_plan, max(res.marginal_error, raa.marginal_error, rbb.marginal_error),
                      res.iterations, res.converged and raa.converged and rbb.converged, True)


@dataclass
class CurveRow:
    k: int
    dist_to_source: float
    dist_to_target: float


def otdd_vs_k_curve(source_emb, source_labels, target_emb, target_labels, gate, k_values,
                    rng: np.random.Generator, temperature: float = 1.0, epsilon: float | None = None,
                    debias: bool = True, features=None) -> list[CurveRow]:
    """OTDD of patch-replaced intermediate data to both endpoint datasets, for each k.

    Features are mean-pooled patch embeddings, optionally passed through
    ``features`` (an EmbeddingBatch -> EmbeddingBatch map such as the encoder)
    first. Mixed rows carry target labels when compared with the target set and
    their paired source labels when compared with the source set.
    """
    N = target_emb.values.shape[1]
    source_labels = np.asarray(source_labels)
    target_labels = np.asarray(target_labels)
    def pooled(batch):
        if features is not None:
            with no_grad():
                batch = features(batch)
        return batch.values.data.mean(axis=1)

    src = FeatureDataset(pooled(source_emb), source_labels)
    tgt = FeatureDataset(pooled(target_emb), target_labels)
    paired_src_labels = source_labels[np.arange(len(target_labels)) % len(source_labels)]
    rows = []
    for k in k_values:
        if not 0 <= k <= N:
            raise ContractError(f"k={k} outside [0, {N}]")
        mix = pare_mix(target_emb, source_emb, gate, int(k), temperature, rng)
        feats = pooled(mix.mixed)
        d_t = otdd(FeatureDataset(feats, target_labels), tgt, epsilon, debias).distance
        d_s = otdd(FeatureDataset(feats, paired_src_labels), src, epsilon, debias).distance
        rows.append(CurveRow(int(k), d_s, d_t))
    return rows
