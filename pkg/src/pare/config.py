"""Flat dotted ``key=value`` configuration and seed-stream splitting.

Config files hold one ``section.key = value`` per line; ``#`` starts a comment.
Every key maps onto a field of :class:`~pare.train.TrainConfig` (nested
dataclasses become dotted sections).

Random streams: ``stream(seed, tag)`` seeds a PCG64 generator from
``SeedSequence(seed, spawn_key=(crc32(tag),))``. Each consumer owns a tag, so
adding a new consumer never shifts the draws of an existing one.
"""

from __future__ import annotations

import copy
import dataclasses
import zlib
from pathlib import Path
from typing import Any

import numpy as np

from .nn import ConfigError


def stream(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(tag.encode()),)))


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ";".join(f"{a}:{b}" for a, b in value)
    return str(value)


def _parse(raw: str, annotation: str, key: str) -> Any:
    raw = raw.strip()
    optional = "None" in annotation
    if optional and raw.lower() in ("none", ""):
        return None
    base = annotation.replace("| None", "").strip()
    try:
        if base == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        if base.startswith("list"):
            pairs = []
            for tok in filter(None, raw.split(";")):
                a, b = tok.split(":")
                pairs.append((int(a), int(b)))
            return pairs
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key} (expected {base})") from exc


def flatten(cfg, prefix: str = "") -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = _format(value)
    return out


def _field_map(cls, prefix: str = "") -> dict[str, tuple[str, ...]]:
    keys = {}
    for f in dataclasses.fields(cls):
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            for sub, path in _field_map(type(default), f"{prefix}{f.name}.").items():
                keys[sub] = (f.name,) + path
        else:
            keys[prefix + f.name] = (f.name,)
    return keys


def valid_keys(cls) -> list[str]:
    return sorted(_field_map(cls))


def apply(cfg, assignments: dict[str, str]):
    """Return a copy of ``cfg`` with dotted-key string assignments applied."""
    fmap = _field_map(type(cfg))
    cfg = copy.deepcopy(cfg)
    for key, raw in assignments.items():
        if key not in fmap:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(fmap))}")
        path = fmap[key]
        target = cfg
        for name in path[:-1]:
            target = getattr(target, name)
        ann = {f.name: f.type for f in dataclasses.fields(target)}[path[-1]]
        setattr(target, path[-1], _parse(raw, str(ann), key))
    for obj in _walk(cfg):
        post = getattr(obj, "__post_init__", None)
        if post is not None:
            post()
    return cfg


def _walk(cfg):
    yield cfg
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            yield from _walk(v)


def parse_assignment(token: str) -> tuple[str, str]:
    if "=" not in token:
        raise ConfigError(f"expected KEY=VALUE, got {token!r}")
    key, value = token.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"empty key in {token!r}")
    return key, value.strip()


def read_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, value = parse_assignment(line)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
        out[key] = value
    return out


def write_config_file(cfg, path: str | Path) -> None:
    lines = [f"{k} = {v}" for k, v in flatten(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")
