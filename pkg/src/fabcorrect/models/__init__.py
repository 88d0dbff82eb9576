"""U-Net family, tandem composition and checkpoints."""
from .checkpoint import (
    checkpoint_bytes,
    checkpoint_hash,
    load_checkpoint,
    parameter_hash,
    parse_checkpoint,
    save_checkpoint,
)
from .unet import (
    LayerSpec,
    ModelGraph,
    TandemStack,
    UNetConfig,
    attention_gate,
    build_attention_unet,
    build_model,
    build_unet,
    compose_tandem,
    soft_binarize,
)

__all__ = [
    "LayerSpec",
    "ModelGraph",
    "TandemStack",
    "UNetConfig",
    "attention_gate",
    "build_attention_unet",
    "build_model",
    "build_unet",
    "checkpoint_bytes",
    "checkpoint_hash",
    "compose_tandem",
    "load_checkpoint",
    "parameter_hash",
    "parse_checkpoint",
    "save_checkpoint",
    "soft_binarize",
]
