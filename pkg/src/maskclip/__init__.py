"""Mask class tokens and relative mask attention on a frozen ViT, in NumPy."""
from .mask_tokens import EmptyMaskError, MaskSet, encode_with_mask_tokens
from .pipeline import EmbeddingTable, PanopticMap, classify, clip_baseline, segment
from .rma import RMAParams, init_rma_params, rma_forward
from .vit import TOY_CONFIG, FrozenWeights, ViTConfig, encode, init_weights

__all__ = [
    "EmptyMaskError", "MaskSet", "encode_with_mask_tokens",
    "EmbeddingTable", "PanopticMap", "classify", "clip_baseline", "segment",
    "RMAParams", "init_rma_params", "rma_forward",
    "TOY_CONFIG", "FrozenWeights", "ViTConfig", "encode", "init_weights",
]
