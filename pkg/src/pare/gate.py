"""Patch scoring and differentiable k-subset selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .nn import ConfigError, EmbeddingBatch, Linear, Module

GATE_VARIANTS = ("fc", "mlp", "mlp_dropout")

# mass floor when masking out already-picked positions; keeps log finite
_MASK_FLOOR = np.finfo(np.float64).tiny


class GateNetwork(Module):
    """Scores each patch in (0, 1).

    ``fc``: Linear(D, 1) + sigmoid. ``mlp``: Linear(D, D/2) + ReLU + Linear(D/2, 1) + sigmoid.
    ``mlp_dropout`` inserts dropout before the last linear map.
    """

    def __init__(self, dim: int, variant: str = "fc", rng: np.random.Generator | None = None,
                 dropout: float = 0.1):
        if variant not in GATE_VARIANTS:
            raise ConfigError(f"unknown gate variant {variant!r}; expected one of {GATE_VARIANTS}")
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"gate dropout must be in [0, 1), got {dropout}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.variant = variant
        self.dropout = dropout
        self.training = True
        if variant == "fc":
            self.fc = Linear(dim, 1, rng)
        else:
            hidden = max(dim // 2, 1)
            self.fc1 = Linear(dim, hidden, rng)
            self.fc2 = Linear(hidden, 1, rng)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if self.variant == "fc":
            z = self.fc(x)
        else:
            h = ad.relu(self.fc1(x))
            if self.variant == "mlp_dropout":
                h = ad.dropout(h, self.dropout, rng if rng is not None else np.random.default_rng(0),
                               self.training)
            z = self.fc2(h)
        return ad.sigmoid(z.reshape(z.shape[:-1]))


@dataclass
class PatchScores:
    values: Tensor  # B×N, each in (0, 1)
    tag: str


def score_patches(gate: GateNetwork, x: EmbeddingBatch, rng: np.random.Generator | None = None) -> PatchScores:
    if x.values.ndim != 3:
        raise ad.DimensionError(f"score_patches expects B×N×D, got {x.values.shape}")
    return PatchScores(gate(x.values, rng), x.tag)


@dataclass
class SubsetMask:
    soft: Tensor  # B×N relaxed k-hot, rows sum to k (entries may overshoot 1 slightly)
    hard: np.ndarray  # B×N exact k-hot
    k: int
    temperature: float
    keys: np.ndarray  # B×N perturbed log-scores the selection was made on

    @property
    def st(self) -> Tensor:
        """Straight-through mask: hard values forward, soft gradients backward."""
        return ad.straight_through(self.hard, self.soft)

    def ranked_indices(self, descending: bool = True) -> np.ndarray:
        """Selected positions per row, ordered by key (B×k)."""
        order = np.argsort(-self.keys if descending else self.keys, axis=1, kind="stable")
        picked = np.take_along_axis(self.hard, order, axis=1) > 0.5
        return order[picked].reshape(self.hard.shape[0], self.k)


def hard_top_k(values: np.ndarray, k: int) -> np.ndarray:
    """Exact k-hot of the k largest entries per row; ties go to the lowest index."""
    values = np.atleast_2d(values)
    out = np.zeros_like(values, dtype=np.float64)
    if k > 0:
        idx = np.argsort(-values, axis=1, kind="stable")[:, :k]
        np.put_along_axis(out, idx, 1.0, axis=1)
    return out


def _as_scores(scores) -> Tensor:
    if isinstance(scores, PatchScores):
        return scores.values
    return ad.as_tensor(scores)


def subset_operator(scores, k: int, temperature: float = 1.0, rng: np.random.Generator | None = None,
                    noise: bool = True) -> SubsetMask:
    """Relaxed top-k by k rounds of Gumbel-perturbed softmax without replacement.

    Each round's distribution is summed into ``soft``; before the next round the
    log-weights are pushed down by ``log(1 - previous round)``. ``hard`` is the
    exact top-k of ``soft``.
    """
    s = _as_scores(scores)
    if s.ndim == 1:
        s = s.reshape(1, -1)
    B, N = s.shape
    if not 0 <= k <= N:
        raise ContractError(f"k={k} outside [0, {N}]")
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")

    logits = ad.log(s)
    if noise:
        if rng is None:
            raise ContractError("subset_operator with noise needs an rng")
        logits = logits + rng.gumbel(size=(B, N))
    keys = logits.data.copy()
    if k == N:
        # nothing to choose: the relaxation would only smear mass around
        return SubsetMask(Tensor(np.ones((B, N))), np.ones((B, N)), k, temperature, keys)

    khot = Tensor(np.zeros((B, N)))
    onehot = None
    for _ in range(k):
        if onehot is not None:
            logits = logits + ad.log(ad.clamp_min(1.0 - onehot, _MASK_FLOOR))
        onehot = ad.softmax(ad.scale(logits, 1.0 / temperature), axis=1)
        khot = khot + onehot
    return SubsetMask(khot, hard_top_k(khot.data, k), k, temperature, keys)


def select_top_k(scores, k: int, temperature: float = 1.0, rng: np.random.Generator | None = None,
                 noise: bool = True) -> SubsetMask:
    return subset_operator(scores, k, temperature, rng, noise)


def select_bottom_k(scores, k: int, temperature: float = 1.0, rng: np.random.Generator | None = None,
                    noise: bool = True) -> SubsetMask:
    """Complement of the top-(N-k) selection."""
    s = _as_scores(scores)
    N = s.shape[-1]
    if not 0 <= k <= N:
        raise ContractError(f"k={k} outside [0, {N}]")
    top = subset_operator(s, N - k, temperature, rng, noise)
    return SubsetMask(1.0 - top.soft, 1.0 - top.hard, k, temperature, top.keys)
