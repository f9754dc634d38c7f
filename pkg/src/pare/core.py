"""Patch replacement, k curricula, the mixed/total losses, and embedding-level baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .gate import GateNetwork, score_patches, select_bottom_k, select_top_k
from .nn import ConfigError, EmbeddingBatch, PaReModel

SCHEDULES = ("linear", "piecewise", "exponential", "constant")
TASK_LOSSES = ("ce", "mse", "dense_ce")


# ---------------------------------------------------------------- k schedule


@dataclass
class KSchedule:
    strategy: str = "linear"
    k_init: int | None = None  # None -> N
    k_final: int = 0
    total_epochs: int | None = None  # None -> training epochs
    piecewise_breaks: list[tuple[int, int]] | None = None
    piecewise_stages: int = 4
    exp_rate: float = 3.0

    def resolve(self, num_patches: int) -> tuple[int, int]:
        k_init = num_patches if self.k_init is None else int(self.k_init)
        k_final = int(self.k_final)
        for name, v in (("k_init", k_init), ("k_final", k_final)):
            if not 0 <= v <= num_patches:
                raise ConfigError(f"{name}={v} outside [0, {num_patches}]")
        if self.strategy not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.strategy!r}; expected one of {SCHEDULES}")
        return k_init, k_final


def schedule_k(s: KSchedule, epoch: int, num_patches: int, total_epochs: int | None = None) -> int:
    """Number of patches to replace at ``epoch``.

    ``linear`` is ``int(k_init - (k_init - k_final) * (epoch / E))``, which for
    k_init=N, k_final=0 is exactly ``int(N - N * (epoch / E))``.
    ``exponential`` decays from k_init to k_final with rate ``exp_rate``,
    normalized so both endpoints are hit. ``piecewise`` holds k on
    ``piecewise_stages`` equal epoch segments stepping from k_init to k_final,
    unless explicit ``piecewise_breaks`` [(epoch, k), ...] are given.
    """
    k_init, k_final = s.resolve(num_patches)
    E = total_epochs if total_epochs is not None else s.total_epochs
    if s.strategy == "constant":
        return k_init
    if E is None:
        raise ConfigError("schedule needs total_epochs")
    if not 0 <= epoch <= E:
        raise ContractError(f"epoch {epoch} outside [0, {E}]")
    if E == 0:
        return k_init
    frac = epoch / E
    lo, hi = min(k_init, k_final), max(k_init, k_final)
    if s.strategy == "linear":
        k = math.floor(k_init - (k_init - k_final) * frac)
    elif s.strategy == "exponential":
        r = s.exp_rate
        if r <= 0:
            raise ConfigError(f"exp_rate must be positive, got {r}")
        decay = (math.exp(-r * frac) - math.exp(-r)) / (1.0 - math.exp(-r))
        k = math.floor(k_final + (k_init - k_final) * decay)
    else:
        if s.piecewise_breaks:
            k = k_init
            for at, value in sorted(s.piecewise_breaks):
                if epoch >= at:
                    k = int(value)
        else:
            n = max(int(s.piecewise_stages), 2)
            stage = min(int(n * epoch // E), n - 1)
            k = math.floor(k_init - (k_init - k_final) * stage / (n - 1))
    return int(min(max(k, lo), hi, num_patches))


# ---------------------------------------------------------------- mixing


@dataclass
class MixOutcome:
    mixed: EmbeddingBatch
    lam: float  # weight of the source term in the mixed loss
    pairing: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 2), dtype=np.int64))  # B×k×(tgt, src)
    k_used: int = 0


@dataclass
class LossWeights:
    beta1: float = 1.0
    beta2: float = 1.0

    def __post_init__(self):
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and nonnegative, got {v}")


def _match_batches(x_t: EmbeddingBatch, x_s: EmbeddingBatch) -> Tensor:
    """Return source values with batch size cycled to the target's; shapes must agree otherwise."""
    t, s = x_t.values, x_s.values
    if t.ndim != 3 or s.ndim != 3 or t.shape[1:] != s.shape[1:]:
        raise ContractError(f"target {t.shape} and source {s.shape} embeddings are not compatible")
    if s.shape[0] == t.shape[0]:
        return s
    return ad.slice_(s, np.arange(t.shape[0]) % s.shape[0])


def _check_k(k: int, n: int) -> None:
    if not 0 <= k <= n:
        raise ContractError(f"k={k} outside [0, {n}]")


def pare_mix(x_t: EmbeddingBatch, x_s: EmbeddingBatch, gate: GateNetwork, k: int, temperature: float = 1.0,
             rng: np.random.Generator | None = None, noise: bool = True) -> MixOutcome:
    """Replace the k lowest-scored target patches with the k highest-scored source patches.

    Pairing is rank-matched: the i-th best source patch lands on the i-th worst
    target position. Forward values use the hard masks; gradients reach the gate
    through the soft masks.
    """
    xs = _match_batches(x_t, x_s)
    B, N, _ = x_t.values.shape
    _check_k(k, N)
    s_t = score_patches(gate, x_t, rng)
    s_s = score_patches(gate, EmbeddingBatch(xs, "source"), rng)
    bottom = select_bottom_k(s_t, k, temperature, rng, noise)
    top = select_top_k(s_s, k, temperature, rng, noise)
    tgt_pos = bottom.ranked_indices(descending=False)
    src_pos = top.ranked_indices(descending=True)

    keep = (1.0 - bottom.st).reshape(B, N, 1)
    weighted_src = xs * top.st.reshape(B, N, 1)
    mixed = x_t.values * keep + ad.route_patches(weighted_src, src_pos, tgt_pos, N)
    pairing = np.stack([tgt_pos, src_pos], axis=-1)
    return MixOutcome(EmbeddingBatch(mixed, "mixed"), k / N, pairing, k)


def mixup_baseline(x_t: EmbeddingBatch, x_s: EmbeddingBatch, alpha: float,
                   rng: np.random.Generator) -> tuple[EmbeddingBatch, float]:
    """Elementwise ``lam_m * x_t + (1 - lam_m) * x_s`` with ``lam_m ~ Beta(alpha, alpha)``.

    The mixed loss should weight the source term by ``1 - lam_m``.
    """
    if not alpha > 0:
        raise ConfigError(f"mixup alpha must be positive, got {alpha}")
    xs = _match_batches(x_t, x_s)
    lam_m = float(rng.beta(alpha, alpha))
    return EmbeddingBatch(ad.scale(x_t.values, lam_m) + ad.scale(xs, 1.0 - lam_m), "mixed"), lam_m


def mixup_outcome(x_t: EmbeddingBatch, x_s: EmbeddingBatch, alpha: float, rng: np.random.Generator) -> MixOutcome:
    mixed, lam_m = mixup_baseline(x_t, x_s, alpha, rng)
    return MixOutcome(mixed, 1.0 - lam_m)


def _replace(x_t: Tensor, xs: Tensor, tgt: np.ndarray, src: np.ndarray) -> Tensor:
    B, N = x_t.shape[:2]
    mask = np.zeros((B, N, 1))
    np.put_along_axis(mask[..., 0], tgt, 1.0, axis=1)
    return x_t * (1.0 - mask) + ad.route_patches(xs, src, tgt, N)


def cutmix_baseline(x_t: EmbeddingBatch, x_s: EmbeddingBatch, k: int, rng: np.random.Generator) -> MixOutcome:
    """Per row, copy a contiguous span of k source positions onto the same target positions."""
    xs = _match_batches(x_t, x_s)
    B, N, _ = x_t.values.shape
    _check_k(k, N)
    starts = rng.integers(0, N - k + 1, size=B)
    pos = starts[:, None] + np.arange(k)[None, :]
    mixed = _replace(x_t.values, xs, pos, pos)
    return MixOutcome(EmbeddingBatch(mixed, "mixed"), k / N, np.stack([pos, pos], axis=-1), k)


def random_replace_baseline(x_t: EmbeddingBatch, x_s: EmbeddingBatch, k: int,
                            rng: np.random.Generator) -> MixOutcome:
    """Like :func:`pare_mix` but both position sets are uniform draws without replacement."""
    xs = _match_batches(x_t, x_s)
    B, N, _ = x_t.values.shape
    _check_k(k, N)
    tgt = np.argsort(rng.random((B, N)), axis=1)[:, :k]
    src = np.argsort(rng.random((B, N)), axis=1)[:, :k]
    mixed = _replace(x_t.values, xs, tgt, src)
    return MixOutcome(EmbeddingBatch(mixed, "mixed"), k / N, np.stack([tgt, src], axis=-1), k)


# ---------------------------------------------------------------- losses


def task_loss(model: PaReModel, features: EmbeddingBatch, y, kind: str = "ce") -> Tensor:
    if kind == "ce":
        return ad.cross_entropy(model.heads.predict_target(features), y)
    if kind == "mse":
        return ad.mse(model.heads.predict_target(features), np.asarray(y, dtype=np.float64))
    if kind == "dense_ce":
        return ad.cross_entropy(model.heads.predict_dense(features), y)
    raise ConfigError(f"unknown task loss {kind!r}; expected one of {TASK_LOSSES}")


class LossTerms(NamedTuple):
    total: Tensor
    tar: Tensor
    mix: Tensor | None


def mixed_loss(model: PaReModel, mix: MixOutcome, y_t, y_s, task_loss_kind: str = "ce") -> Tensor:
    """``(1 - lam) * L_tar(h^t(g(x_m)), y_t) + lam * CE(h^s(g(x_m)), y_s)``."""
    lam = float(mix.lam)
    feats = model.encode(mix.mixed)
    terms = []
    if lam < 1.0:
        terms.append(ad.scale(task_loss(model, feats, y_t, task_loss_kind), 1.0 - lam))
    if lam > 0.0:
        y_s = np.asarray(y_s)
        n = feats.values.shape[0]
        if y_s.shape[0] != n:
            y_s = y_s[np.arange(n) % y_s.shape[0]]
        terms.append(ad.scale(ad.cross_entropy(model.heads.predict_source(feats), y_s), lam))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def loss_terms(model: PaReModel, x_t: EmbeddingBatch, y_t, mix: MixOutcome | None, y_s,
               weights: LossWeights, task_loss_kind: str = "ce") -> LossTerms:
    l_tar = task_loss(model, model.encode(x_t), y_t, task_loss_kind)
    total = ad.scale(l_tar, weights.beta1)
    l_mix = None
    if mix is not None and weights.beta2 > 0:
        l_mix = mixed_loss(model, mix, y_t, y_s, task_loss_kind)
        total = total + ad.scale(l_mix, weights.beta2)
    return LossTerms(total, l_tar, l_mix)


def total_loss(model: PaReModel, x_t: EmbeddingBatch, y_t, mix: MixOutcome | None, y_s,
               weights: LossWeights, task_loss_kind: str = "ce") -> Tensor:
    """``beta1 * L_tar(h^t(g(x_t)), y_t) + beta2 * L_mix``."""
    return loss_terms(model, x_t, y_t, mix, y_s, weights, task_loss_kind).total
