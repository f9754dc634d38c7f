import dataclasses
import math

import numpy as np
import pytest

from pare.core import KSchedule, LossWeights, schedule_k
from pare.nn import ConfigError, EncoderConfig
from pare.train import (DataConfig, TrainConfig, ablation_csv, ablation_text, make_datasets, metrics_csv,
                        run_ablation, train)


def small(**kw) -> TrainConfig:
    base = dict(epochs=5, pretrain_epochs=1, encoder=EncoderConfig(num_patches=4),
                data=DataConfig(source_count=40, target_count=60))
    base.update(kw)
    return TrainConfig(**base)


def run(cfg):
    return train(cfg, *make_datasets(cfg))


def test_zero_epochs_naive_is_chance():
    cfg = TrainConfig(method="naive", epochs=0, pretrain_epochs=0)
    res = run(cfg)
    assert res.rows == []
    n = 120  # 20% test carve of 600
    sigma = math.sqrt((5 / 6) * (1 / 6) / n)
    assert abs(res.final_test_error - 5 / 6) <= 3 * sigma


def test_linear_curriculum_ends_at_zero():
    res = run(small(epochs=5))
    assert [r.k for r in res.rows] == [4, 3, 2, 1, 0]
    assert res.rows[-1].lam == 0.0


@pytest.mark.parametrize("strategy", ["linear", "exponential", "piecewise", "constant"])
def test_curriculum_trace_follows_schedule(strategy):
    cfg = small(epochs=6, schedule=KSchedule(strategy=strategy))
    res = run(cfg)
    sched = dataclasses.replace(cfg.schedule, total_epochs=6)
    for r in res.rows:
        assert r.k == schedule_k(sched, r.epoch, 4)
        assert r.lam == r.k / 4


def test_loss_accounting():
    res = run(small(weights=LossWeights(0.7, 1.3)))
    for r in res.rows:
        assert abs(r.train_loss_total - (0.7 * r.train_loss_tar + 1.3 * r.train_loss_mix)) <= 1e-9


def test_naive_has_no_mixed_term():
    res = run(small(method="naive"))
    assert all(r.train_loss_mix == 0.0 and r.lam == 0.0 for r in res.rows)
    assert all(r.train_loss_total == r.train_loss_tar for r in res.rows)


def test_mixup_lambda_in_unit_interval():
    res = run(small(method="mixup", mixup_alpha=0.5))
    assert all(0.0 < r.lam < 1.0 for r in res.rows)


@pytest.mark.parametrize("method", ["pare", "random_replace", "cutmix", "mixup", "naive"])
def test_metrics_csv_reproducible(method):
    a, b = run(small(method=method, seed=3)), run(small(method=method, seed=3))
    assert metrics_csv(a.rows) == metrics_csv(b.rows)
    assert "wallclock" not in metrics_csv(a.rows)


def test_seed_changes_run():
    assert metrics_csv(run(small(seed=1)).rows) != metrics_csv(run(small(seed=2)).rows)


def test_sgd_optimizer_runs():
    res = run(small(optim=dataclasses.replace(TrainConfig().optim, kind="sgd", lr=0.05)))
    assert res.status == "ok" and len(res.rows) == 5


def test_nan_in_data_diverges():
    cfg = small()
    source, target = make_datasets(cfg)
    target.samples[:] = np.nan
    res = train(cfg, source, target)
    assert res.status == "diverged"
    assert len(res.rows) == 1 and math.isnan(res.rows[0].train_loss_total)
    assert math.isnan(res.final_test_error)
    assert "non-finite" in res.message


def test_huge_learning_rate_diverges():
    with np.errstate(all="ignore"):
        res = run(small(optim=dataclasses.replace(TrainConfig().optim, lr=1e30)))
    assert res.status == "diverged"


class TestAblation:
    def test_two_seed_stdev(self):
        (cell,) = run_ablation([small()], [0, 1])
        a, b = cell.errors
        assert cell.mean == pytest.approx((a + b) / 2)
        assert cell.std == pytest.approx(abs(a - b) / math.sqrt(2), abs=1e-15)

    def test_single_cell_equals_train(self):
        cfg = small(seed=4)
        (cell,) = run_ablation([cfg], [4])
        assert cell.errors == [run(cfg).final_test_error]

    def test_failures_recorded_per_cell(self):
        bad_lr = small(optim=dataclasses.replace(TrainConfig().optim, lr=1e30))
        bad_patches = small(encoder=EncoderConfig(num_patches=5))
        with np.errstate(all="ignore"):
            cells = run_ablation([small(), bad_lr, bad_patches], [0, 1], ["ok", "lr", "patches"])
        assert [c.failures for c in cells] == [0, 2, 2]
        assert {r.status for r in cells[1].runs} == {"diverged"}
        assert {r.status for r in cells[2].runs} == {"error"}
        assert math.isnan(cells[2].mean)
        assert "1:diverged" in ablation_csv(cells)

    def test_table_layout(self):
        cells = run_ablation([small(method="pare"), small(method="random_replace")], [0],
                             ["pare (gate)", "pare (random)"])
        lines = ablation_text(cells).splitlines()
        assert len(lines) == 3
        assert lines[1].startswith("pare (gate)") and lines[2].startswith("pare (random)")

    def test_parallel_matches_serial(self):
        grid = [small(method="pare"), small(method="naive")]
        assert ablation_csv(run_ablation(grid, [0, 1], workers=2)) == ablation_csv(run_ablation(grid, [0, 1]))

    def test_empty_grid(self):
        with pytest.raises(ConfigError):
            run_ablation([], [0])
        with pytest.raises(ConfigError):
            run_ablation([small()], [])


def test_less_target_data_is_harder():
    errs = {}
    for fraction in (0.1, 0.9):
        cells = run_ablation([TrainConfig(method="naive", epochs=15, target_fraction=fraction)], [0, 1])
        errs[fraction] = cells[0].mean
    assert errs[0.1] > errs[0.9]


@pytest.mark.parametrize("kw", [dict(method="bogus"), dict(epochs=-1), dict(batch_size=0),
                                dict(method="mixup", mixup_alpha=0.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)
