"""Memory-efficient video transfer: a trainable spatial-temporal side network on a frozen ViT."""

from .config import TrainConfig, load_config
from .side import SideConfig, make_fusion_plan
from .vit import ViTConfig

__all__ = ["TrainConfig", "load_config", "SideConfig", "ViTConfig", "make_fusion_plan"]
