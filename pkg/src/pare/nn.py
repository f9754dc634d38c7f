"""Embedders, a small pre-norm transformer encoder, and the dual prediction heads."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class EmbeddingBatch:
    values: Tensor  # B×N×D
    tag: str  # "source" | "target" | "mixed"

    @property
    def shape(self):
        return self.values.shape


class Module:
    """Minimal container: parameters are Tensors, children are Modules."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True):
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        if "training" in vars(self):
            self.training = mode
        return self

    def eval(self):
        return self.train(False)


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = uniform_init(rng, d_in, (d_in, d_out))
        self.bias = uniform_init(rng, d_in, (d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


# ---------------------------------------------------------------- embedders


def patchify(raw: np.ndarray, patch: int) -> np.ndarray:
    """B×H×W grid -> B×N×(patch*patch), patches in row-major order."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 2:
        raw = raw[None]
    B, H, W = raw.shape
    if H % patch or W % patch:
        raise ConfigError(f"grid {H}x{W} is not divisible into {patch}x{patch} patches")
    gh, gw = H // patch, W // patch
    x = raw.reshape(B, gh, patch, gw, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(B, gh * gw, patch * patch)


class SourceEmbedder(Module):
    """Grid H×W -> N non-overlapping square patches, each linearly projected to D."""

    def __init__(self, grid: tuple[int, int], num_patches: int, dim: int, rng: np.random.Generator):
        H, W = grid
        side = int(round(np.sqrt(num_patches)))
        if side * side != num_patches or H % side or W % side or H // side != W // side:
            raise ConfigError(f"grid {H}x{W} cannot be split into {num_patches} square patches")
        self.grid = (H, W)
        self.patch = H // side
        self.num_patches = num_patches
        self.proj = Linear(self.patch * self.patch, dim, rng)

    def __call__(self, raw: np.ndarray) -> EmbeddingBatch:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-2:] != self.grid:
            raise DimensionError(f"source raw shape {raw.shape[-2:]} != {self.grid}")
        return EmbeddingBatch(self.proj(Tensor(patchify(raw, self.patch))), "source")


class TargetEmbedder(Module):
    """1-D sequence of length L = N*window -> N windows, each linearly projected to D."""

    def __init__(self, length: int, num_patches: int, dim: int, rng: np.random.Generator):
        if length % num_patches:
            raise ConfigError(f"sequence length {length} not divisible by {num_patches} patches")
        self.length = length
        self.window = length // num_patches
        self.num_patches = num_patches
        self.proj = Linear(self.window, dim, rng)

    def __call__(self, raw: np.ndarray) -> EmbeddingBatch:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim == 1:
            raw = raw[None]
        if raw.shape[-1] != self.length:
            raise DimensionError(f"target raw length {raw.shape[-1]} != {self.length}")
        windows = raw.reshape(raw.shape[0], self.num_patches, self.window)
        return EmbeddingBatch(self.proj(Tensor(windows)), "target")


# ---------------------------------------------------------------- encoder


@dataclass
class EncoderConfig:
    depth: int = 2
    heads: int = 4
    dim: int = 32
    mlp_dim: int = 64
    num_patches: int = 16
    positional: bool = True

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"encoder depth must be >= 1, got {self.depth}")
        if self.dim % self.heads:
            raise ConfigError(f"model dim {self.dim} not divisible by {self.heads} heads")


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        h = self.heads
        dh = D // h
        qkv = self.qkv(x).reshape(B, N, 3, h, dh).transpose(2, 0, 3, 1, 4)  # 3×B×h×N×dh
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax(ad.scale(q @ ad.swapaxes(k, -1, -2), 1.0 / np.sqrt(dh)), axis=-1)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
        return self.out(y)


class Block(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.dim)
        self.attn = SelfAttention(cfg.dim, cfg.heads, rng)
        self.ln2 = LayerNorm(cfg.dim)
        self.fc1 = Linear(cfg.dim, cfg.mlp_dim, rng)
        self.fc2 = Linear(cfg.mlp_dim, cfg.dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(ad.relu(self.fc1(self.ln2(x))))


class Encoder(Module):
    """Pre-norm transformer; learned positional table shared by every modality."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        if cfg.positional:
            self.pos = Tensor(rng.normal(0.0, 0.02, size=(cfg.num_patches, cfg.dim)), requires_grad=True)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.depth)]
        self.ln_f = LayerNorm(cfg.dim)

    def __call__(self, x: EmbeddingBatch) -> EmbeddingBatch:
        h = x.values
        if h.ndim != 3 or h.shape[1:] != (self.cfg.num_patches, self.cfg.dim):
            raise DimensionError(f"encoder expects B×{self.cfg.num_patches}×{self.cfg.dim}, got {h.shape}")
        if self.cfg.positional:
            h = h + self.pos
        for block in self.blocks:
            h = block(h)
        return EmbeddingBatch(self.ln_f(h), x.tag)


# ---------------------------------------------------------------- heads


class PredictorHeads(Module):
    def __init__(self, dim: int, target_classes: int, source_classes: int, rng: np.random.Generator,
                 dense_classes: int | None = None):
        self.target = Linear(dim, target_classes, rng)
        self.source = Linear(dim, source_classes, rng)
        self.dense = Linear(dim, dense_classes, rng) if dense_classes else None

    def predict_target(self, features: EmbeddingBatch) -> Tensor:
        return self.target(ad.mean_pool(features.values))

    def predict_source(self, features: EmbeddingBatch) -> Tensor:
        return self.source(ad.mean_pool(features.values))

    def predict_dense(self, features: EmbeddingBatch) -> Tensor:
        """Per-patch logits B×N×K."""
        if self.dense is None:
            raise ConfigError("dense prediction requested but no dense head was configured")
        return self.dense(features.values)


class PaReModel(Module):
    """Embedders f^s / f^t, shared encoder g, heads h^t / h^s, and the patch gate."""

    def __init__(self, embed_source: SourceEmbedder, embed_target: TargetEmbedder, encoder: Encoder,
                 heads: PredictorHeads, gate):
        if embed_source.num_patches != embed_target.num_patches:
            raise ConfigError("source and target embedders must emit the same number of patches")
        self.embed_source = embed_source
        self.embed_target = embed_target
        self.encoder = encoder
        self.heads = heads
        self.gate = gate

    def encode(self, x: EmbeddingBatch) -> EmbeddingBatch:
        return self.encoder(x)


def build_model(cfg: EncoderConfig, source_grid=(16, 16), target_length: int = 256,
                target_classes: int = 6, source_classes: int = 4, rng: np.random.Generator | None = None,
                gate_variant: str = "fc", gate_dropout: float = 0.1, dense_classes: int | None = None) -> PaReModel:
    from .gate import GateNetwork

    rng = rng if rng is not None else np.random.default_rng(0)
    cfg.validate()
    return PaReModel(
        SourceEmbedder(source_grid, cfg.num_patches, cfg.dim, rng),
        TargetEmbedder(target_length, cfg.num_patches, cfg.dim, rng),
        Encoder(cfg, rng),
        PredictorHeads(cfg.dim, target_classes, source_classes, rng, dense_classes),
        GateNetwork(cfg.dim, gate_variant, rng, dropout=gate_dropout),
    )


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(module: Module, path: str | Path) -> None:
    arrays = {name: p.data for name, p in module.named_parameters()}
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(module: Module, path: str | Path) -> None:
    with np.load(path) as blob:
        version = int(blob["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
        params = dict(module.named_parameters())
        missing = set(params) - set(blob.files)
        if missing:
            raise ConfigError(f"checkpoint missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = blob[name]
            if arr.shape != p.shape:
                raise DimensionError(f"checkpoint {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(np.float64, copy=True)
