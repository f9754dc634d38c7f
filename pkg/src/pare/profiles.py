"""Performance profiles over a method × task error matrix."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .nn import ConfigError


@dataclass
class ErrorTable:
    methods: list[str]
    tasks: list[str]
    errors: np.ndarray  # methods × tasks


@dataclass
class ProfileCurve:
    method: str
    taus: np.ndarray
    rho: np.ndarray

    def at(self, tau: float) -> float:
        """ρ(τ) as a right-continuous step function of the grid."""
        i = np.searchsorted(self.taus, tau, side="right") - 1
        return float(self.rho[i]) if i >= 0 else 0.0


def fixture_path() -> Path:
    return Path(str(resources.files("pare") / "fixtures" / "benchmark_errors.csv"))


def read_errors_csv(path: str | Path) -> ErrorTable:
    """First column is the method name, the header row names the tasks."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise ConfigError(f"{path}: need a header row and at least one method row")
    header = rows[0]
    tasks = [t.strip() for t in header[1:]]
    if not tasks:
        raise ConfigError(f"{path}: header has no task columns")
    methods, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ConfigError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ConfigError(f"{path}: row {lineno}: {exc}") from exc
        methods.append(row[0].strip())
    return ErrorTable(methods, tasks, np.array(values, dtype=np.float64))


def ratio_matrix(errors: np.ndarray) -> np.ndarray:
    """r(m, t) = error(m, t) / min over methods of error(·, t)."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim != 2 or errors.size == 0:
        raise ContractError(f"errors must be a nonempty methods × tasks matrix, got shape {errors.shape}")
    if not np.all(np.isfinite(errors)) or np.any(errors <= 0):
        m, t = np.argwhere(~np.isfinite(errors) | (errors <= 0))[0]
        raise ContractError(f"errors must be positive and finite; entry ({m}, {t}) is {errors[m, t]}")
    return errors / errors.min(axis=0, keepdims=True)


def performance_profile(errors: np.ndarray, methods: list[str],
                        taus: np.ndarray | None = None) -> list[ProfileCurve]:
    """ρ_m(τ) = fraction of tasks with r(m, t) ≤ τ.

    The default τ grid is 1 together with every distinct ratio, so each curve
    reaches 1 at the grid's last point.
    """
    r = ratio_matrix(errors)
    if len(methods) != r.shape[0]:
        raise ContractError(f"{len(methods)} method names for {r.shape[0]} rows")
    if taus is None:
        taus = np.unique(np.concatenate([[1.0], r.ravel()]))
    taus = np.asarray(taus, dtype=np.float64)
    T = r.shape[1]
    return [ProfileCurve(m, taus, (r[i][None, :] <= taus[:, None]).sum(axis=1) / T)
            for i, m in enumerate(methods)]


def profile_csv(curves: list[ProfileCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tau"] + [c.method for c in curves])
    for j, tau in enumerate(curves[0].taus):
        w.writerow([repr(float(tau))] + [repr(float(c.rho[j])) for c in curves])
    return buf.getvalue()


def profile_text(curves: list[ProfileCurve], marks=(1.0, 1.1, 1.5, 2.0, 4.0)) -> str:
    width = max(len("method"), *(len(c.method) for c in curves))
    head = f"{'method':<{width}}" + "".join(f"  ρ({t:g})".rjust(9) for t in marks)
    lines = [head]
    for c in curves:
        lines.append(f"{c.method:<{width}}" + "".join(f"{c.at(t):9.3f}" for t in marks))
    return "\n".join(lines) + "\n"
