"""Command-line entry point: ``pare {train,ablate,otdd,profile,gen-data}``.

Exit codes: 0 success, 1 usage/config error, 2 numerical divergence.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

from scipy.stats import spearmanr

from .autodiff import ContractError
from .config import apply, flatten, parse_assignment, read_config_file, stream
from .data import gen_source, gen_target, write_columnar
from .nn import ConfigError, build_model, save_checkpoint
from .otdd import EstimationError, otdd_vs_k_curve
from .profiles import fixture_path, performance_profile, profile_csv, profile_text, read_errors_csv
from .train import (TrainConfig, ablation_csv, ablation_text, make_datasets, run_ablation, train, write_metrics,
                    write_timings)

log = logging.getLogger("pare")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def load_assignments(path: str | None) -> dict[str, str]:
    """Config file assignments; a run manifest (``.json``) is accepted too."""
    if path is None:
        return {}
    p = Path(path)
    if p.suffix == ".json":
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            return {k: str(v) for k, v in json.loads(p.read_text())["config"].items()}
        except (json.JSONDecodeError, KeyError, AttributeError) as exc:
            raise ConfigError(f"{p}: not a run manifest ({exc})") from exc
    return read_config_file(p)


def resolve_config(args) -> TrainConfig:
    assignments = load_assignments(args.config)
    for token in args.set or []:
        key, value = parse_assignment(token)
        assignments[key] = value
    return apply(TrainConfig(), assignments)


def _write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _manifest(command: str, cfg: TrainConfig, artifacts: dict[str, str], **extra) -> dict:
    return {"command": command, "config": flatten(cfg), "seed": cfg.seed, "artifacts": artifacts,
            "version": _version(), "started": _now(), "finished": None, "status": "running", **extra}


def _parse_seeds(text: str | None, default: int) -> list[int]:
    if text is None:
        return [default]
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --seeds {text!r}") from exc
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


# ---------------------------------------------------------------- subcommands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {"metrics": str(out / "metrics.csv"), "timings": str(out / "timings.csv"),
                 "checkpoint": str(out / "checkpoint.npz"), "manifest": str(out / "manifest.json")}
    manifest = _manifest("train", cfg, artifacts)
    _write_manifest(out / "manifest.json", manifest)

    source, target = make_datasets(cfg)
    result = train(cfg, source, target)
    write_metrics(result.rows, artifacts["metrics"])
    write_timings(result.rows, artifacts["timings"])
    save_checkpoint(result.model, artifacts["checkpoint"])

    manifest.update(finished=_now(), status=result.status, final_test_error=result.final_test_error,
                    best_test_error=result.best_test_error, best_epoch=result.best_epoch, message=result.message)
    _write_manifest(out / "manifest.json", manifest)
    if result.status != "ok":
        print(f"diverged: {result.message}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"final test error {result.final_test_error:.4f} (best {result.best_test_error:.4f} "
          f"at epoch {result.best_epoch})")
    return EXIT_OK


def expand_grid(base: TrainConfig, specs: list[str]) -> tuple[list[TrainConfig], list[str]]:
    """Cartesian product of ``KEY=v1,v2,...`` specs applied to ``base``."""
    axes = []
    for token in specs:
        if "=" not in token:
            raise ConfigError(f"malformed grid token {token!r} (expected KEY=v1,v2,...)")
        key, values = token.split("=", 1)
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not key.strip() or not vals:
            raise ConfigError(f"malformed grid token {token!r} (expected KEY=v1,v2,...)")
        axes.append((key.strip(), vals))
    if not axes:
        raise ConfigError("empty grid: pass at least one --grid KEY=v1,v2,...")
    grid, labels = [], []
    for combo in itertools.product(*(vals for _, vals in axes)):
        assignment = {key: v for (key, _), v in zip(axes, combo)}
        grid.append(apply(base, assignment))
        labels.append(",".join(f"{k}={v}" for k, v in assignment.items()))
    return grid, labels


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    grid, labels = expand_grid(base, args.grid or [])
    seeds = _parse_seeds(args.seeds, base.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {"table": str(out / "ablation.csv"), "text": str(out / "ablation.txt"),
                 "manifest": str(out / "manifest.json")}
    manifest = _manifest("ablate", base, artifacts, grid=args.grid, seeds=seeds)
    _write_manifest(out / "manifest.json", manifest)

    cells = run_ablation(grid, seeds, labels, workers=args.workers)
    Path(artifacts["table"]).write_text(ablation_csv(cells))
    text = ablation_text(cells)
    Path(artifacts["text"]).write_text(text)
    print(text, end="")
    manifest.update(finished=_now(), status="ok", runs=len(grid) * len(seeds))
    _write_manifest(out / "manifest.json", manifest)
    return EXIT_OK


def parse_k_list(text: str | None, n: int) -> list[int]:
    if text is None:
        step = max(n // 8, 1)
        return list(range(0, n + 1, step))
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    if not tokens:
        raise ConfigError("empty k list")
    ks = []
    for t in tokens:
        k = n if t.upper() == "N" else int(t) if t.lstrip("-").isdigit() else None
        if k is None:
            raise ConfigError(f"bad k value {t!r}")
        if not 0 <= k <= n:
            raise ConfigError(f"k={k} outside [0, {n}]")
        ks.append(k)
    return ks


def cmd_otdd(args) -> int:
    cfg = resolve_config(args)
    n = cfg.encoder.num_patches
    ks = parse_k_list(args.k, n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {"curve": str(out / "otdd_curve.csv"), "summary": str(out / "otdd_summary.txt"),
                 "manifest": str(out / "manifest.json")}
    manifest = _manifest("otdd", cfg, artifacts, k_values=ks, count=args.count, features=args.features)
    _write_manifest(out / "manifest.json", manifest)

    source = gen_source(cfg.seed, args.count, cfg.data.source_noise)
    target = gen_target(cfg.seed, args.count, cfg.data.target_noise)
    model = build_model(cfg.encoder, source.descriptor.raw_shape, target.descriptor.raw_shape[0],
                        target.descriptor.num_classes, source.descriptor.num_classes,
                        rng=stream(cfg.seed, "init"), gate_variant=cfg.gate_variant, gate_dropout=cfg.gate_dropout)
    model.eval()
    rows = otdd_vs_k_curve(model.embed_source(source.samples), source.labels,
                           model.embed_target(target.samples), target.labels,
                           model.gate, ks, stream(cfg.seed, "otdd"), cfg.temperature,
                           features=model.encode if args.features == "encoder" else None)
    lines = ["k,otdd_to_source,otdd_to_target"] + [f"{r.k},{r.dist_to_source!r},{r.dist_to_target!r}" for r in rows]
    Path(artifacts["curve"]).write_text("\n".join(lines) + "\n")
    if len(rows) >= 2:
        rho_s = float(spearmanr(ks, [r.dist_to_source for r in rows])[0])
        rho_t = float(spearmanr(ks, [r.dist_to_target for r in rows])[0])
        summary = f"spearman(k, otdd_to_source)={rho_s:.4f} spearman(k, otdd_to_target)={rho_t:.4f}"
    else:
        rho_s = rho_t = None
        summary = "spearman undefined for a single k"
    Path(artifacts["summary"]).write_text(summary + "\n")
    print(summary)
    manifest.update(finished=_now(), status="ok", spearman_source=rho_s, spearman_target=rho_t)
    _write_manifest(out / "manifest.json", manifest)
    return EXIT_OK


def cmd_profile(args) -> int:
    path = Path(args.errors) if args.errors else fixture_path()
    table = read_errors_csv(path)
    curves = performance_profile(table.errors, table.methods)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "profile.csv").write_text(profile_csv(curves))
    text = profile_text(curves)
    (out / "profile.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source, target = make_datasets(cfg)
    write_columnar(source, out / "source.csv")
    write_columnar(target, out / "target.csv")
    print(f"wrote {len(source)} source and {len(target)} target samples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 so that 2 stays reserved for divergence."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pare", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_default):
        p.add_argument("--config", metavar="PATH", help="key = value config file or a run manifest")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--out", metavar="DIR", default=out_default)

    p = sub.add_parser("train", help="train one configuration")
    common(p, "runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train a cartesian grid of configurations over seeds")
    common(p, "runs/ablate")
    p.add_argument("--grid", action="append", metavar="KEY=v1,v2", help="one grid axis (repeatable)")
    p.add_argument("--seeds", metavar="LIST", help="comma-separated seeds (default: config seed)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("otdd", help="OTDD of intermediate data to both modalities across k")
    common(p, "runs/otdd")
    p.add_argument("--k", metavar="LIST", help="comma-separated k values; N stands for num_patches")
    p.add_argument("--count", type=int, default=200, help="samples per modality")
    p.add_argument("--features", choices=("embedder", "encoder"), default="embedder",
                   help="pool embedder outputs (default) or encoder outputs")
    p.set_defaults(func=cmd_otdd)

    p = sub.add_parser("profile", help="performance profiles from a method × task error CSV")
    p.add_argument("--errors", metavar="PATH", help="error CSV (default: the bundled ten-task benchmark table)")
    p.add_argument("--out", metavar="DIR", default="runs/profile")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("gen-data", help="export the synthetic datasets as columnar text")
    common(p, "runs/data")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, EstimationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
