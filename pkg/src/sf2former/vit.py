"""Spatial branch: patch embedding, class token, position embeddings and a
stack of pre-norm self-attention encoder layers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, softmax, trunc_normal
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 1
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: float = 4.0
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")
        if min(self.image_size, self.patch_size, self.channels, self.embed_dim, self.depth, self.heads) < 1:
            raise ValueError("all VitConfig extents must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``[H, W, C]`` (or ``[B, H, W, C]``) into row-major flattened patches ``[N, P*P*C]``.

    Patches are ordered top-left to bottom-right and each patch is flattened
    in (row, column, channel) order.
    """
    image = np.asarray(image)
    single = image.ndim == 3
    if single:
        image = image[None]
    if image.ndim != 4:
        raise ValueError(f"expected [H, W, C] or [B, H, W, C], got shape {image.shape}")
    b, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    patches = image.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    patches = patches.reshape(b, (h // p) * (w // p), p * p * c)
    return patches[0] if single else patches


class EncoderLayer:
    def __init__(self, name: str, cfg: VitConfig, rng: np.random.Generator, dtype=np.float32):
        d = cfg.embed_dim
        self.heads = cfg.heads
        self.ln1 = LayerNorm(f"{name}.ln1", d, cfg.ln_eps, dtype)
        self.q = Linear(f"{name}.attn.q", d, d, rng, dtype)
        self.k = Linear(f"{name}.attn.k", d, d, rng, dtype)
        self.v = Linear(f"{name}.attn.v", d, d, rng, dtype)
        self.proj = Linear(f"{name}.attn.proj", d, d, rng, dtype)
        self.ln2 = LayerNorm(f"{name}.ln2", d, cfg.ln_eps, dtype)
        self.mlp = MLP(f"{name}.mlp", d, cfg.hidden_dim, rng, dtype)

    def parameters(self) -> list[Parameter]:
        out = self.ln1.parameters()
        for lin in (self.q, self.k, self.v, self.proj):
            out += lin.parameters()
        return out + self.ln2.parameters() + self.mlp.parameters()


class VitParams:
    """All learnable tensors of the spatial branch."""

    def __init__(self, cfg: VitConfig, rng: np.random.Generator, dtype=np.float32, prefix: str = "vit"):
        self.config = cfg
        d = cfg.embed_dim
        self.patch_embed = Linear(f"{prefix}.patch_embed", cfg.patch_dim, d, rng, dtype)
        self.cls_token = Parameter(f"{prefix}.cls_token", trunc_normal(rng, (1, d), dtype=dtype))
        self.pos_embed = Parameter(f"{prefix}.pos_embed", trunc_normal(rng, (cfg.num_tokens, d), dtype=dtype))
        self.layers = [EncoderLayer(f"{prefix}.layers.{i}", cfg, rng, dtype) for i in range(cfg.depth)]
        self.norm = LayerNorm(f"{prefix}.norm", d, cfg.ln_eps, dtype)

    def parameters(self) -> list[Parameter]:
        out = self.patch_embed.parameters() + [self.cls_token, self.pos_embed]
        for layer in self.layers:
            out += layer.parameters()
        return out + self.norm.parameters()


def embed(patches, params: VitParams) -> Tensor:
    """Project patches and prepend the class token, then add position embeddings.

    Returns ``[B, N+1, D]`` (``[N+1, D]`` for unbatched input).
    """
    patches = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=params.pos_embed.dtype))
    single = patches.ndim == 2
    if single:
        patches = patches.reshape((1,) + patches.shape)
    b, n, k = patches.shape
    cfg = params.config
    if n != cfg.num_patches or k != cfg.patch_dim:
        raise ValueError(f"patches {patches.shape[1:]} do not match config ({cfg.num_patches}, {cfg.patch_dim})")
    tokens = params.patch_embed(patches)
    cls = T.broadcast_to(T.reshape(params.cls_token, (1, 1, cfg.embed_dim)), (b, 1, cfg.embed_dim))
    z = T.concat([cls, tokens], axis=1) + params.pos_embed
    return T.take(z, 0, axis=0) if single else z


def attention(x: Tensor, layer: EncoderLayer, attn_maps: list | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention over ``[B, T, D]``."""
    b, t, d = x.shape
    h = layer.heads
    dh = d // h

    def heads(lin):
        return T.transpose(T.reshape(lin(x), (b, t, h, dh)), (0, 2, 1, 3))

    q, k, v = heads(layer.q), heads(layer.k), heads(layer.v)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    if attn_maps is not None:
        attn_maps.append(weights.data)
    ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, t, d))
    return layer.proj(ctx)


def encoder_layer(z: Tensor, layer: EncoderLayer, attn_maps: list | None = None) -> Tensor:
    """Pre-norm residual block: attention sublayer, then MLP sublayer."""
    single = z.ndim == 2
    if single:
        z = T.reshape(z, (1,) + z.shape)
    z = attention(layer.ln1(z), layer, attn_maps) + z
    z = layer.mlp(layer.ln2(z)) + z
    return T.take(z, 0, axis=0) if single else z


def vit_forward(image, params: VitParams, attn_maps: list | None = None) -> Tensor:
    """Image ``[B, H, W, C]`` to the normalized class-token feature ``[B, D]``."""
    image = np.asarray(image)
    single = image.ndim == 3
    if single:
        image = image[None]
    cfg = params.config
    if image.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ValueError(f"image shape {image.shape[1:]} does not match config "
                         f"({cfg.image_size}, {cfg.image_size}, {cfg.channels})")
    z = embed(patchify(image, cfg.patch_size), params)
    for layer in params.layers:
        z = encoder_layer(z, layer, attn_maps)
    y = params.norm(T.take(z, 0, axis=1))
    return T.take(y, 0, axis=0) if single else y
