"""Independent reference computations used by the tests."""

from __future__ import annotations

import itertools

import numpy as np


def numerical_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def gradcheck(build, params, h: float = 1e-6) -> float:
    """Max relative error between tape and finite-difference gradients over ``params``.

    ``build()`` must rebuild the scalar loss Tensor from the current parameter data.
    """
    from pare import autodiff as ad

    for p in params:
        p.grad = None
    ad.backward(build())
    worst = 0.0
    for p in params:
        num = numerical_grad(lambda: build().item(), p.data, h)
        tape = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, rel_err(tape, num))
    return worst


def brute_top_k(values: np.ndarray, k: int) -> np.ndarray:
    """k-hot of the k largest entries by explicit sort, ties broken by lower index."""
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    out = np.zeros(len(values))
    out[order[:k]] = 1.0
    return out


def exact_ot(cost: np.ndarray) -> float:
    """Exact OT between uniform marginals for tiny problems.

    Equal sizes: minimum over permutation matchings (vertices of the Birkhoff
    polytope). Unequal sizes: the transportation LP via HiGHS.
    """
    cost = np.asarray(cost, dtype=np.float64)
    m1, m2 = cost.shape
    if m1 == m2:
        rows = np.arange(m1)
        return min(float(cost[rows, list(p)].sum()) for p in itertools.permutations(range(m2))) / m1
    from scipy.optimize import linprog

    A_eq = np.zeros((m1 + m2, m1 * m2))
    for i in range(m1):
        A_eq[i, i * m2:(i + 1) * m2] = 1.0
    for j in range(m2):
        A_eq[m1 + j, j::m2] = 1.0
    b_eq = np.concatenate([np.full(m1, 1.0 / m1), np.full(m2, 1.0 / m2)])
    res = linprog(cost.reshape(-1), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    return float(res.fun)


def brute_mix(target: np.ndarray, source: np.ndarray, t_scores: np.ndarray, s_scores: np.ndarray, k: int):
    """Reference patch replacement for one row: explicit sorting and element-wise copying."""
    n = len(t_scores)
    t_order = sorted(range(n), key=lambda i: (t_scores[i], -i))  # lowest score first
    s_order = sorted(range(n), key=lambda i: (-s_scores[i], i))  # highest score first
    out = [np.array(p, dtype=float) for p in target]
    pairs = []
    for t_pos, s_pos in zip(t_order[:k], s_order[:k]):
        out[t_pos] = np.array(source[s_pos], dtype=float)
        pairs.append((t_pos, s_pos))
    return np.stack(out), pairs
