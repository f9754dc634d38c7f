"""Seeded synthetic source (2-D pattern grids) and target (1-D two-tone sequences) modalities."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import ConfigError

SOURCE_CLASSES = ("horizontal_bars", "vertical_bars", "checkerboard", "blob")
TARGET_FREQUENCIES = ((2, 9), (3, 11), (4, 13), (5, 15), (6, 17), (7, 19))


@dataclass
class ModalityDescriptor:
    kind: str  # "grid2d" | "sequence1d"
    raw_shape: tuple[int, ...]
    num_classes: int
    params: dict = field(default_factory=dict)
    noise_level: float = 0.0

    def __post_init__(self):
        self.raw_shape = tuple(int(n) for n in self.raw_shape)
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.kind not in ("grid2d", "sequence1d"):
            raise ConfigError(f"unknown modality kind {self.kind!r}")

    def check_patches(self, num_patches: int) -> None:
        if self.kind == "sequence1d":
            if self.raw_shape[0] % num_patches:
                raise ConfigError(f"length {self.raw_shape[0]} not divisible by {num_patches} patches")
        else:
            side = math.isqrt(num_patches)
            H, W = self.raw_shape
            if side * side != num_patches or H % side or W % side:
                raise ConfigError(f"grid {H}x{W} cannot hold {num_patches} square patches")


@dataclass
class LabeledDataset:
    samples: np.ndarray  # count × raw_shape
    labels: np.ndarray
    descriptor: ModalityDescriptor
    seed: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.samples[idx], self.labels[idx], self.descriptor, self.seed)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.descriptor.num_classes)


def _balanced_labels(rng: np.random.Generator, count: int, num_classes: int) -> np.ndarray:
    return rng.permutation(np.arange(count) % num_classes)


def source_descriptor(noise_level: float = 0.3, size: int = 16) -> ModalityDescriptor:
    return ModalityDescriptor("grid2d", (size, size), len(SOURCE_CLASSES),
                              {"patterns": list(SOURCE_CLASSES), "bar_width": 2}, noise_level)


def target_descriptor(noise_level: float = 0.5, length: int = 256) -> ModalityDescriptor:
    return ModalityDescriptor("sequence1d", (length,), len(TARGET_FREQUENCIES),
                              {"frequencies": [list(f) for f in TARGET_FREQUENCIES]}, noise_level)


def _source_pattern(label: int, size: int, rng: np.random.Generator, width: int) -> np.ndarray:
    # bars and checkerboard keep a fixed phase: a random phase would put x and -x
    # in the same class and make the classes linearly inseparable
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if label == 0:
        img = (r // width) % 2 * 2.0 - 1.0
    elif label == 1:
        img = (c // width) % 2 * 2.0 - 1.0
    elif label == 2:
        img = ((r // width + c // width) % 2) * 2.0 - 1.0
    else:
        center = (size - 1) / 2 + rng.uniform(-1.5, 1.5, size=2)
        w = rng.uniform(size / 8, size / 4)
        img = 2.0 * np.exp(-((r - center[0]) ** 2 + (c - center[1]) ** 2) / (2 * w * w)) - 1.0
    return img * rng.uniform(0.8, 1.2)


def gen_source(seed: int, count: int, noise_level: float = 0.3, size: int = 16) -> LabeledDataset:
    """16×16 grids of horizontal bars, vertical bars, checkerboards, or a centered blob."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    desc = source_descriptor(noise_level, size)
    rng = np.random.default_rng([seed, 0x5EED5])
    labels = _balanced_labels(rng, count, desc.num_classes)
    width = desc.params["bar_width"]
    samples = np.stack([_source_pattern(int(y), size, rng, width) for y in labels])
    samples = samples + noise_level * rng.standard_normal(samples.shape)
    return LabeledDataset(samples, labels, desc, seed)


def gen_target(seed: int, count: int, noise_level: float = 0.5, length: int = 256) -> LabeledDataset:
    """Length-256 sums ``sin(2π f1 t + φ1) + sin(2π f2 t + φ2)`` plus noise; (f1, f2) is the class, phases are random."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    desc = target_descriptor(noise_level, length)
    rng = np.random.default_rng([seed, 0x7A26E7])
    labels = _balanced_labels(rng, count, desc.num_classes)
    freqs = np.asarray(TARGET_FREQUENCIES, dtype=np.float64)[labels]  # count × 2
    # each component gets its own random phase; the class is the frequency pair
    phases = rng.uniform(0.0, 2 * np.pi, size=(count, 2))
    t = np.arange(length) / length
    waves = np.sin(2 * np.pi * freqs[:, :, None] * t[None, None, :] + phases[:, :, None])
    samples = waves.sum(axis=1) + noise_level * rng.standard_normal((count, length))
    return LabeledDataset(samples, labels, desc, seed)


def limited_split(d: LabeledDataset, fraction: float, seed: int,
                  test_fraction: float = 0.2) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified (train, test) split.

    The test set (``test_fraction`` of each class) is carved first and does not
    depend on ``fraction``; train keeps ``ceil(fraction * pool)`` of each class.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng([seed, 0x5B117])
    train_idx, test_idx = [], []
    for c in range(d.descriptor.num_classes):
        idx = np.flatnonzero(d.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        pool = idx[n_test:]
        n_train = math.ceil(fraction * len(pool))
        if n_train == 0:
            raise ConfigError(f"fraction {fraction} leaves class {c} with no training samples")
        test_idx.append(idx[:n_test])
        train_idx.append(pool[:n_train])
    return d.subset(np.sort(np.concatenate(train_idx))), d.subset(np.sort(np.concatenate(test_idx)))


# ---------------------------------------------------------------- columnar text export


def write_columnar(d: LabeledDataset, path: str | Path) -> None:
    """One sample per row: flattened values then the label. First line is a JSON header."""
    header = {"descriptor": asdict(d.descriptor), "seed": d.seed, "count": len(d)}
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header) + "\n")
        for x, y in zip(d.samples.reshape(len(d), -1), d.labels):
            fh.write(",".join(repr(float(v)) for v in x) + f",{int(y)}\n")


def read_columnar(path: str | Path) -> LabeledDataset:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ConfigError(f"{path}: missing header line")
        header = json.loads(first[2:])
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    desc = ModalityDescriptor(**header["descriptor"])
    values = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
    labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    return LabeledDataset(values.reshape((len(rows),) + desc.raw_shape), labels, desc, int(header["seed"]))
