"""Two-branch MRI slice classifier (ViT + global-filter network) on a numpy autodiff core."""

__version__ = "0.1.0"

from .model import ModelConfig, SF2FormerModel, full_scale_config, fuse_forward, predict_proba, toy_config

__all__ = ["ModelConfig", "SF2FormerModel", "__version__", "full_scale_config", "fuse_forward",
           "predict_proba", "toy_config"]
