from .layers import CgcLayer, EmbeddingTables, FeedForward, open_sigmoid
from .backbone import (
    ARCHITECTURES,
    BackboneConfig,
    MMoE,
    PleNet,
    SharedBottom,
    SingleTaskMlps,
    build_backbone,
)
from .preference import PreferenceNet, preference_loss

__all__ = [
    "ARCHITECTURES",
    "BackboneConfig",
    "CgcLayer",
    "EmbeddingTables",
    "FeedForward",
    "MMoE",
    "PleNet",
    "PreferenceNet",
    "SharedBottom",
    "SingleTaskMlps",
    "build_backbone",
    "open_sigmoid",
    "preference_loss",
]
