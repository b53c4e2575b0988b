"""Frequency branch: patch tokens on a 2-D grid mixed by learnable global
filters, followed by global average pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear
from .spectral import GlobalFilter, apply_filter
from .tensor import Parameter, Tensor
from .vit import patchify


@dataclass(frozen=True)
class GfConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 1
    embed_dim: int = 512
    depth: int = 19
    mlp_ratio: float = 4.0
    ln_eps: float = 1e-6
    filter_std: float = 0.01

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        if min(self.image_size, self.patch_size, self.channels, self.embed_dim, self.depth) < 1:
            raise ValueError("all GfConfig extents must be positive")

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @property
    def num_tokens(self) -> int:
        h, w = self.grid
        return h * w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


class GfBlockParams:
    def __init__(self, name: str, cfg: GfConfig, rng: np.random.Generator, dtype=np.float32):
        h, w = cfg.grid
        self.ln1 = LayerNorm(f"{name}.ln1", cfg.embed_dim, cfg.ln_eps, dtype)
        self.filter = GlobalFilter.create(f"{name}.filter", h, w, cfg.embed_dim, rng, cfg.filter_std, dtype)
        self.ln2 = LayerNorm(f"{name}.ln2", cfg.embed_dim, cfg.ln_eps, dtype)
        self.mlp = MLP(f"{name}.mlp", cfg.embed_dim, cfg.hidden_dim, rng, dtype)

    def parameters(self) -> list[Parameter]:
        return self.ln1.parameters() + [self.filter.re, self.filter.im] + self.ln2.parameters() + self.mlp.parameters()


class GfParams:
    def __init__(self, cfg: GfConfig, rng: np.random.Generator, dtype=np.float32, prefix: str = "gfnet"):
        self.config = cfg
        self.patch_embed = Linear(f"{prefix}.patch_embed", cfg.patch_dim, cfg.embed_dim, rng, dtype)
        self.blocks = [GfBlockParams(f"{prefix}.blocks.{i}", cfg, rng, dtype) for i in range(cfg.depth)]
        self.norm = LayerNorm(f"{prefix}.norm", cfg.embed_dim, cfg.ln_eps, dtype)

    def parameters(self) -> list[Parameter]:
        out = self.patch_embed.parameters()
        for block in self.blocks:
            out += block.parameters()
        return out + self.norm.parameters()


def gf_embed(image, params: GfParams) -> Tensor:
    """Project non-overlapping patches onto the token grid ``[B, H', W', m]``."""
    image = np.asarray(image)
    single = image.ndim == 3
    if single:
        image = image[None]
    cfg = params.config
    if image.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ValueError(f"image shape {image.shape[1:]} does not match config "
                         f"({cfg.image_size}, {cfg.image_size}, {cfg.channels})")
    h, w = cfg.grid
    patches = Tensor(patchify(image, cfg.patch_size).astype(params.norm.gamma.dtype, copy=False))
    grid = T.reshape(params.patch_embed(patches), (image.shape[0], h, w, cfg.embed_dim))
    return T.take(grid, 0, axis=0) if single else grid


def gf_block(tokens: Tensor, block: GfBlockParams) -> Tensor:
    """``tokens + MLP(LN2(filter(LN1(tokens))))``."""
    mixed = apply_filter(block.ln1(tokens), block.filter)
    return block.mlp(block.ln2(mixed)) + tokens


def gfnet_forward(image, params: GfParams) -> Tensor:
    """Image to the pooled frequency-branch feature ``[B, m]``."""
    tokens = gf_embed(image, params)
    for block in params.blocks:
        tokens = gf_block(tokens, block)
    normed = params.norm(tokens)
    return T.mean(normed, axis=(-3, -2))
