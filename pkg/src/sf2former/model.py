"""Two-branch classifier: spatial and frequency features joined by a linear head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .gfnet import GfConfig, GfParams, gfnet_forward
from .nn import Linear, softmax
from .tensor import Parameter, Tensor
from .vit import VitConfig, VitParams, vit_forward

BRANCHES = ("both", "vit", "gfnet")
NUM_CLASSES = 2


@dataclass(frozen=True)
class ModelConfig:
    vit: VitConfig = field(default_factory=VitConfig)
    gfnet: GfConfig = field(default_factory=GfConfig)
    branch: str = "both"

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}, got {self.branch!r}")
        v, g = self.vit, self.gfnet
        if (v.image_size, v.channels) != (g.image_size, g.channels):
            raise ValueError("both branches must share image size and channel count")

    @property
    def image_size(self) -> int:
        return self.vit.image_size

    @property
    def channels(self) -> int:
        return self.vit.channels

    @property
    def fusion_width(self) -> int:
        return {"both": self.vit.embed_dim + self.gfnet.embed_dim,
                "vit": self.vit.embed_dim,
                "gfnet": self.gfnet.embed_dim}[self.branch]

    def to_dict(self) -> dict:
        return {"vit": asdict(self.vit), "gfnet": asdict(self.gfnet), "branch": self.branch}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(VitConfig(**d["vit"]), GfConfig(**d["gfnet"]), d.get("branch", "both"))


def full_scale_config(channels: int = 1, branch: str = "both") -> ModelConfig:
    """224x224 input, 16x16 patches, ViT-Base encoder and the 19-block, 512-wide filter branch."""
    return ModelConfig(
        VitConfig(image_size=224, patch_size=16, channels=channels, embed_dim=768, depth=12, heads=12),
        GfConfig(image_size=224, patch_size=16, channels=channels, embed_dim=512, depth=19),
        branch,
    )


def toy_config(branch: str = "both", image_size: int = 32, patch_size: int = 8) -> ModelConfig:
    return ModelConfig(
        VitConfig(image_size=image_size, patch_size=patch_size, channels=1, embed_dim=32, depth=2, heads=2),
        GfConfig(image_size=image_size, patch_size=patch_size, channels=1, embed_dim=32, depth=2),
        branch,
    )


class SF2FormerModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        # independent streams so the branches initialize identically regardless of the other
        vit_rng, gf_rng, head_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        self.vit = VitParams(config.vit, vit_rng, dtype)
        self.gfnet = GfParams(config.gfnet, gf_rng, dtype)
        self.head = Linear("head", config.fusion_width, NUM_CLASSES, head_rng, dtype)

    def parameters(self) -> list[Parameter]:
        return self.vit.parameters() + self.gfnet.parameters() + self.head.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            p.data[...] = state[name]

    def features(self, images) -> Tensor:
        branch = self.config.branch
        if branch == "vit":
            return vit_forward(images, self.vit)
        if branch == "gfnet":
            return gfnet_forward(images, self.gfnet)
        return T.concat([vit_forward(images, self.vit), gfnet_forward(images, self.gfnet)], axis=-1)

    def forward(self, images) -> Tensor:
        return fuse_forward(self, images)

    __call__ = forward


def _as_images(model: SF2FormerModel, images) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 2 or (images.ndim == 3 and images.shape[-1] != model.config.channels):
        images = images[..., None]
    size, c = model.config.image_size, model.config.channels
    if images.shape[-3:] != (size, size, c):
        raise ValueError(f"image shape {images.shape[-3:]} does not match the model input ({size}, {size}, {c})")
    return images.astype(model.dtype, copy=False)


def fuse_forward(model: SF2FormerModel, images) -> Tensor:
    """Slices ``[B, H, W(, C)]`` to class logits ``[B, 2]`` (``[2]`` for a single slice)."""
    return model.head(model.features(_as_images(model, images)))


def predict_proba(model: SF2FormerModel, images, batch_size: int = 64) -> np.ndarray:
    images = _as_images(model, images)
    if images.ndim == 3:
        return softmax(fuse_forward(model, images)).data
    chunks = [softmax(fuse_forward(model, images[i:i + batch_size])).data
              for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, NUM_CLASSES), model.dtype)


def predict_slice(model: SF2FormerModel, image) -> tuple[int, np.ndarray]:
    """Class index (ties to 0) and the probability pair for one slice."""
    probs = softmax(fuse_forward(model, image)).data
    return int(np.argmax(probs)), probs
