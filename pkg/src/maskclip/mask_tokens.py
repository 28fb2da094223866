"""Mask class tokens: patch occupancy, the block attention mask, and the single-pass forward."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import vit
from .vit import FrozenWeights, TokenSequence, ViTConfig


class EmptyMaskError(ValueError):
    def __init__(self, index: int):
        super().__init__(f"mask {index} has no pixel at or above the binarization threshold")
        self.index = index


@dataclass
class MaskSet:
    """M soft masks over an H x W grid, values in [0, 1]."""

    masks: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        m = np.asarray(self.masks, dtype=np.float64)
        if m.ndim == 2:
            m = m[None]
        if m.ndim != 3:
            raise ValueError(f"masks must be [M, H, W], got shape {m.shape}")
        if m.size and (m.min() < 0.0 or m.max() > 1.0 or not np.all(np.isfinite(m))):
            raise ValueError("mask values must lie in [0, 1]")
        self.masks = m

    def __len__(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    def binary(self) -> np.ndarray:
        return self.masks >= self.threshold

    def validate(self) -> "MaskSet":
        """Reject masks with no pixel at or above threshold."""
        empty = ~self.binary().reshape(len(self), -1).any(axis=1)
        if empty.any():
            raise EmptyMaskError(int(np.argmax(empty)))
        return self


def patch_occupancy(masks: MaskSet, patch_size: int) -> np.ndarray:
    """[M, N] boolean, True where mask i has no pixel inside patch j (masked-out polarity)."""
    m, h, w = masks.masks.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"mask size {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    b = masks.binary().reshape(m, gh, patch_size, gw, patch_size)
    hit = b.any(axis=(2, 4)).reshape(m, gh * gw)
    empty = ~hit.any(axis=1)
    if empty.any():
        raise EmptyMaskError(int(np.argmax(empty)))
    return ~hit


def build_attention_mask(n: int, m: int, occupancy: np.ndarray) -> np.ndarray:
    """Block attention mask over N image tokens, 1 class token and M mask tokens (True = masked)."""
    occupancy = np.asarray(occupancy, dtype=bool).reshape(m, n)
    t = n + 1 + m
    mask = np.ones((t, t), dtype=bool)
    mask[: n + 1, : n + 1] = False
    mask[n + 1 :, :n] = occupancy
    mask[n + 1 :, n] = False
    return mask


def check_geometry(image: np.ndarray, masks: MaskSet, config: ViTConfig) -> None:
    if len(masks) and masks.shape != (config.image_size, config.image_size):
        raise ValueError(f"mask grid {masks.shape} does not match image size {config.image_size}")


def encode_with_mask_tokens(
    image: np.ndarray,
    masks: MaskSet,
    weights: FrozenWeights,
    config: ViTConfig | None = None,
):
    """One forward pass with a mask class token per mask.

    Returns ``(mask_features [M, out_dim], class_feature [out_dim], tokens)``.
    """
    cfg = weights.config if config is None else config
    check_geometry(image, masks, cfg)
    m = len(masks)
    occ = patch_occupancy(masks, cfg.patch_size) if m else np.zeros((0, cfg.num_patches), dtype=bool)
    vit._record_forward_pass()
    seq = vit.embed_tokens(image, weights, num_mask=m)
    attn_mask = build_attention_mask(seq.num_image, m, occ)
    for i in range(cfg.depth):
        seq = vit.attention_layer(seq, attn_mask, weights.layer(i), cfg.heads)
    feats = vit.project(seq.tokens[seq.num_image :], weights)
    return feats[1:], feats[0], seq
