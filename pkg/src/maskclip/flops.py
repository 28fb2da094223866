"""Closed-form multiply-accumulate counts for the encoder and the per-mask baseline.

Only matmul/conv terms are counted; softmax, norms and activations are ignored.
Nothing attends to a mask class token, so mask tokens need queries, outputs and
MLPs but no keys or values, and their attention rows span only the N + 1 image
and class columns.
Reported FLOPs equal MACs times ``flops_per_mac`` (1 by default, the usual
convention of transformer FLOP tables).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .vit import ViTConfig


@dataclass
class FlopsEstimate:
    stages: dict[str, int] = field(default_factory=dict)
    flops_per_mac: int = 1

    @property
    def macs(self) -> int:
        return sum(self.stages.values())

    @property
    def flops(self) -> int:
        return self.flops_per_mac * self.macs

    @property
    def tflops(self) -> float:
        return self.flops / 1e12

    def scaled(self, k: int) -> "FlopsEstimate":
        return FlopsEstimate({name: k * v for name, v in self.stages.items()}, self.flops_per_mac)


def vit_l14(image_size: int = 640) -> ViTConfig:
    return ViTConfig(image_size=image_size, patch_size=14, depth=24, dim=1024, heads=16, mlp_ratio=4, out_dim=768)


def flops_forward(
    config: ViTConfig,
    n: int | None = None,
    m: int = 0,
    rma_layers: Iterable[int] = (),
    flops_per_mac: int = 1,
) -> FlopsEstimate:
    """One encoder pass over N image tokens, the class token and M mask tokens.

    ``n`` defaults to the floor patch grid of ``config`` (a non-divisible image
    size drops its remainder, as a strided conv would).
    """
    d, p = config.dim, config.patch_size
    n = config.num_patches if n is None else n
    t = n + 1 + m
    depth = config.depth
    hidden = config.mlp_ratio * d
    stages = {
        "patch_embed": n * 3 * p * p * d,
        "attn_proj": depth * (2 * t + 2 * (n + 1)) * d * d,
        "attn_logits_values": depth * 2 * t * (n + 1) * d,
        "mlp": depth * 2 * t * d * hidden,
        "final_proj": (1 + m) * d * config.out_dim,
    }
    layers = [k for k in rma_layers]
    if layers and m:
        r = len(layers)
        stages["rma_f2"] = r * m * n * p * p * d
        stages["rma_relative_proj"] = r * (m * n * d * d + n * d * d)
        stages["rma_relative_logits"] = r * m * n * d
        stages["rma_refine_product"] = r * m * n * d
        half = max(d // 2, 1)
        stages["rma_refine_convs"] = r * m * n * 9 * (d * half + half)
    return FlopsEstimate(stages, flops_per_mac)


def per_mask_token(config: ViTConfig, n: int | None = None) -> int:
    """MACs one extra mask class token adds to a pass without RMA."""
    return flops_forward(config, n, 1).macs - flops_forward(config, n, 0).macs


def flops_baseline(config: ViTConfig, m: int, n: int | None = None, flops_per_mac: int = 1) -> FlopsEstimate:
    """M independent plain passes, one per masked image."""
    return flops_forward(config, n, 0, (), flops_per_mac).scaled(m)
