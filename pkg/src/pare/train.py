"""Training loop, ablation runner, and metrics output."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import flatten, stream
from .core import (KSchedule, LossWeights, cutmix_baseline, loss_terms, mixup_outcome, pare_mix,
                   random_replace_baseline, schedule_k)
from .data import LabeledDataset, gen_source, gen_target, limited_split
from .nn import ConfigError, EncoderConfig, PaReModel, build_model

log = logging.getLogger(__name__)

METHODS = ("pare", "mixup", "cutmix", "random_replace", "naive")
METRICS_HEADER = ("epoch", "k", "lambda", "train_loss_total", "train_loss_tar", "train_loss_mix", "test_error")


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0


@dataclass
class DataConfig:
    source_count: int = 400
    target_count: int = 600
    source_noise: float = 0.3
    target_noise: float = 0.5


@dataclass
class TrainConfig:
    method: str = "pare"
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    temperature: float = 1.0
    gate_variant: str = "fc"
    gate_dropout: float = 0.1
    mixup_alpha: float = 1.0
    target_fraction: float = 1.0
    task_loss: str = "ce"
    pretrain_epochs: int = 5
    schedule: KSchedule = field(default_factory=KSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "mixup" and not self.mixup_alpha > 0:
            raise ConfigError("mixup needs mixup_alpha > 0")
        if self.optim.kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optim.kind!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def label(self) -> str:
        return ",".join(f"{k}={v}" for k, v in flatten(self).items() if k != "seed")


@dataclass
class MetricsRow:
    epoch: int
    k: int
    lam: float
    train_loss_total: float
    train_loss_tar: float
    train_loss_mix: float
    test_error: float
    wallclock_seconds: float = 0.0

    def csv_fields(self) -> list[str]:
        return [str(self.epoch), str(self.k), repr(self.lam), repr(self.train_loss_total),
                repr(self.train_loss_tar), repr(self.train_loss_mix), repr(self.test_error)]


@dataclass
class TrainResult:
    model: PaReModel
    rows: list[MetricsRow]
    status: str  # "ok" | "diverged"
    final_test_error: float
    best_test_error: float
    best_epoch: int
    message: str = ""


class Divergence(RuntimeError):
    pass


def make_datasets(cfg: TrainConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.data
    return (gen_source(cfg.seed, d.source_count, d.source_noise),
            gen_target(cfg.seed, d.target_count, d.target_noise))


def evaluate(model: PaReModel, data: LabeledDataset, batch_size: int = 256, task_loss: str = "ce") -> float:
    """0-1 error (per-patch error for dense tasks)."""
    model.eval()
    wrong = total = 0
    with ad.no_grad():
        for i in range(0, len(data), batch_size):
            feats = model.encode(model.embed_target(data.samples[i:i + batch_size]))
            y = data.labels[i:i + batch_size]
            if task_loss == "dense_ce":
                pred = model.heads.predict_dense(feats).data.argmax(-1)
            else:
                pred = model.heads.predict_target(feats).data.argmax(-1)
            wrong += int((pred != y).sum())
            total += int(np.asarray(y).size)
    model.train()
    return wrong / max(total, 1)


def _optimizer(cfg: TrainConfig, params):
    if cfg.optim.kind == "adam":
        return ad.Adam(params, lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    return ad.SGD(params, lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)


def _source_batches(source: LabeledDataset, batch_size: int, rng: np.random.Generator):
    """Endless source minibatches, reshuffled on every pass."""
    while True:
        perm = rng.permutation(len(source))
        for i in range(0, len(perm) - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]
        if len(perm) < batch_size:
            yield perm


def pretrain_source(model: PaReModel, source: LabeledDataset, cfg: TrainConfig) -> None:
    """Fit f^s, g and h^s on the source task; stands in for a pretrained source model."""
    params = (model.embed_source.parameters() + model.encoder.parameters()
              + model.heads.source.parameters())
    opt = _optimizer(cfg, params)
    rng = stream(cfg.seed, "pretrain")
    for _ in range(cfg.pretrain_epochs):
        perm = rng.permutation(len(source))
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            feats = model.encode(model.embed_source(source.samples[idx]))
            loss = ad.cross_entropy(model.heads.predict_source(feats), source.labels[idx])
            ad.backward(loss)
            opt.step()
            opt.zero_grad()


def _mix(cfg: TrainConfig, model: PaReModel, x_t, x_s, k: int, rng: np.random.Generator):
    if cfg.method == "pare":
        return pare_mix(x_t, x_s, model.gate, k, cfg.temperature, rng)
    if cfg.method == "random_replace":
        return random_replace_baseline(x_t, x_s, k, rng)
    if cfg.method == "cutmix":
        return cutmix_baseline(x_t, x_s, k, rng)
    if cfg.method == "mixup":
        return mixup_outcome(x_t, x_s, cfg.mixup_alpha, rng)
    return None


def train(cfg: TrainConfig, source: LabeledDataset, target: LabeledDataset) -> TrainResult:
    """Fine-tune on the target task with the configured mixing method, one MetricsRow per epoch."""
    N = cfg.encoder.num_patches
    target.descriptor.check_patches(N)
    source.descriptor.check_patches(N)
    schedule = cfg.schedule
    if schedule.total_epochs is None:
        schedule = dataclasses.replace(schedule, total_epochs=cfg.epochs)
    schedule.resolve(N)
    weights = cfg.weights if cfg.method != "naive" else LossWeights(cfg.weights.beta1, 0.0)

    model = build_model(cfg.encoder, source.descriptor.raw_shape, target.descriptor.raw_shape[0],
                        target.descriptor.num_classes, source.descriptor.num_classes,
                        rng=stream(cfg.seed, "init"), gate_variant=cfg.gate_variant,
                        gate_dropout=cfg.gate_dropout)
    train_t, test_t = limited_split(target, cfg.target_fraction, cfg.seed)
    if cfg.pretrain_epochs > 0:
        pretrain_source(model, source, cfg)

    opt = _optimizer(cfg, model.parameters())
    loader_rng = stream(cfg.seed, "target_loader")
    source_iter = _source_batches(source, cfg.batch_size, stream(cfg.seed, "source_loader"))
    mix_rng = stream(cfg.seed, "mix")

    rows: list[MetricsRow] = []
    status, message = "ok", ""
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        k = schedule_k(schedule, epoch, N)
        sums = np.zeros(3)
        lam_sum = 0.0
        steps = 0
        perm = loader_rng.permutation(len(train_t))
        try:
            for i in range(0, len(perm), cfg.batch_size):
                idx = perm[i:i + cfg.batch_size]
                x_t = model.embed_target(train_t.samples[idx])
                y_t = train_t.labels[idx]
                mix, y_s = None, None
                if weights.beta2 > 0:
                    sidx = next(source_iter)
                    x_s = model.embed_source(source.samples[sidx])
                    y_s = source.labels[sidx]
                    mix = _mix(cfg, model, x_t, x_s, k, mix_rng)
                terms = loss_terms(model, x_t, y_t, mix, y_s, weights, cfg.task_loss)
                total = terms.total.item()
                if not math.isfinite(total):
                    raise Divergence(f"non-finite loss {total} at epoch {epoch}, step {steps}")
                ad.backward(terms.total)
                opt.step()
                opt.zero_grad()
                l_mix = terms.mix.item() if terms.mix is not None else 0.0
                sums += (total, terms.tar.item(), l_mix)
                lam_sum += mix.lam if mix is not None else 0.0
                steps += 1
        except (Divergence, FloatingPointError) as exc:
            status, message = "diverged", str(exc)
            log.warning("run diverged: %s", exc)
            rows.append(MetricsRow(epoch, k, k / N, math.nan, math.nan, math.nan, math.nan,
                                   time.perf_counter() - t0))
            break
        means = sums / max(steps, 1)
        lam = k / N if cfg.method != "mixup" else lam_sum / max(steps, 1)
        if cfg.method == "naive":
            lam = 0.0
        err = evaluate(model, test_t, task_loss=cfg.task_loss)
        rows.append(MetricsRow(epoch, k, lam, float(means[0]), float(means[1]), float(means[2]), err,
                               time.perf_counter() - t0))

    if status == "ok":
        final = rows[-1].test_error if rows else evaluate(model, test_t, task_loss=cfg.task_loss)
        finite = [r for r in rows if math.isfinite(r.test_error)]
        best = min(finite, key=lambda r: r.test_error) if finite else None
        best_err, best_epoch = (best.test_error, best.epoch) if best else (final, -1)
    else:
        final, best_err, best_epoch = math.nan, math.nan, -1
    return TrainResult(model, rows, status, final, best_err, best_epoch, message)


# ---------------------------------------------------------------- output


def metrics_csv(rows: list[MetricsRow]) -> str:
    """Deterministic CSV; wall-clock time is deliberately excluded."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(r.csv_fields())
    return buf.getvalue()


def write_metrics(rows: list[MetricsRow], path: str | Path) -> None:
    Path(path).write_text(metrics_csv(rows))


def write_timings(rows: list[MetricsRow], path: str | Path) -> None:
    Path(path).write_text("epoch,wallclock_seconds\n"
                          + "".join(f"{r.epoch},{r.wallclock_seconds:.6f}\n" for r in rows))


# ---------------------------------------------------------------- ablations


@dataclass
class RunOutcome:
    seed: int
    test_error: float | None
    status: str
    message: str = ""


@dataclass
class AblationCell:
    label: str
    config: TrainConfig
    runs: list[RunOutcome]

    @property
    def errors(self) -> list[float]:
        return [r.test_error for r in self.runs if r.status == "ok" and r.test_error is not None]

    @property
    def failures(self) -> int:
        return sum(r.status != "ok" for r in self.runs)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.errors) if self.errors else math.nan

    @property
    def std(self) -> float:
        e = self.errors
        return statistics.stdev(e) if len(e) >= 2 else 0.0


def _run_one(args) -> RunOutcome:
    cfg, seed = args
    cfg = dataclasses.replace(cfg, seed=seed)
    try:
        source, target = make_datasets(cfg)
        res = train(cfg, source, target)
    except Exception as exc:  # recorded per cell, the grid keeps going
        return RunOutcome(seed, None, "error", f"{type(exc).__name__}: {exc}")
    if res.status != "ok":
        return RunOutcome(seed, None, res.status, res.message)
    return RunOutcome(seed, res.final_test_error, "ok")


def run_ablation(grid: list[TrainConfig], seeds: list[int], labels: list[str] | None = None,
                 workers: int = 1) -> list[AblationCell]:
    """Train every (config, seed) pair; cells come back in grid order."""
    if not grid:
        raise ConfigError("ablation grid is empty")
    if not seeds:
        raise ConfigError("no seeds given")
    jobs = [(cfg, s) for cfg in grid for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_one, jobs))
    else:
        outcomes = [_run_one(j) for j in jobs]
    labels = labels or [cfg.label() for cfg in grid]
    n = len(seeds)
    return [AblationCell(labels[i], cfg, outcomes[i * n:(i + 1) * n]) for i, cfg in enumerate(grid)]


ABLATION_HEADER = ("label", "mean_error", "std_error", "n_ok", "n_failed", "per_seed")


def ablation_csv(cells: list[AblationCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for c in cells:
        per_seed = ";".join(f"{r.seed}:{r.test_error!r}" if r.status == "ok" else f"{r.seed}:{r.status}"
                            for r in c.runs)
        w.writerow([c.label, repr(c.mean), repr(c.std), len(c.errors), c.failures, per_seed])
    return buf.getvalue()


def ablation_text(cells: list[AblationCell]) -> str:
    width = max(len("config"), *(len(c.label) for c in cells))
    lines = [f"{'config':<{width}}  {'error (mean ± std)':>20}  failed"]
    for c in cells:
        lines.append(f"{c.label:<{width}}  {c.mean:>9.4f} ± {c.std:<8.4f}  {c.failures:>6}")
    return "\n".join(lines) + "\n"
