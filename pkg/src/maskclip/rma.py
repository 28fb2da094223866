"""Relative Mask Attention: mask patch tokens, the relative logit term, and mask refinement.

Layer numbers in an RMA set are 1-based (layer ``k`` is the k-th transformer
block). Projections act on the layer-normed tokens a block feeds its own
query/key projections, so ``t_mc`` / ``t_im`` below are LN1 outputs.

Gradients are hand-derived. Image and class tokens never attend mask tokens,
so they do not depend on any RMA parameter; the backward pass therefore only
walks the mask-token rows and treats image/class keys and values as constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import numerics as nx
from . import vit
from .mask_tokens import MaskSet, build_attention_mask, check_geometry, patch_occupancy
from .vit import FrozenWeights, RelativeBlock, ViTConfig, _f32, _split_heads

DEFAULT_EPS = 1e-4

PARAM_NAMES = (
    "f2.weight",
    "f2.bias",
    "qm.weight",
    "qm.bias",
    "km.weight",
    "km.bias",
    "fr1.weight",
    "fr1.bias",
    "fr2.weight",
    "fr2.bias",
)


def default_layers(depth: int) -> tuple[int, ...]:
    """Every quarter of the depth, ending at the last layer (24 -> 6, 12, 18, 24)."""
    step = max(depth // 4, 1)
    return tuple(sorted(range(depth, 0, -step)[:4]))


def prefix(layer: int) -> str:
    return f"rma.layer{layer}."


@dataclass
class RMAParams:
    """Trainable RMA tensors keyed ``rma.layer<k>.<name>`` plus the layer set."""

    layers: tuple[int, ...]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.layers = tuple(sorted(set(int(k) for k in self.layers)))

    def layer(self, k: int) -> dict[str, np.ndarray]:
        pre = prefix(k)
        return {name: self.tensors[pre + name] for name in PARAM_NAMES}

    def validate(self, config: ViTConfig) -> "RMAParams":
        if any(k < 1 or k > config.depth for k in self.layers):
            raise ValueError(f"RMA layers {self.layers} outside 1..{config.depth}")
        for k in self.layers:
            missing = [n for n in PARAM_NAMES if prefix(k) + n not in self.tensors]
            if missing:
                raise ValueError(f"RMA layer {k} missing tensors {missing}")
        return self

    def copy(self) -> "RMAParams":
        return RMAParams(self.layers, {k: v.copy() for k, v in self.tensors.items()})


def init_rma_params(
    weights: FrozenWeights,
    layers: Iterable[int] | None = None,
    seed: int = 0,
    f2_std: float = 0.02,
) -> RMAParams:
    """Relative projections start as copies of the frozen query/key maps, the
    refinement head's last conv starts at zero (identity refinement)."""
    cfg = weights.config
    layers = default_layers(cfg.depth) if layers is None else tuple(layers)
    if not layers:
        return RMAParams(())
    rng = np.random.default_rng(seed)
    d, p, half = cfg.dim, cfg.patch_size, max(cfg.dim // 2, 1)
    t = {}
    for k in sorted(set(layers)):
        if not 1 <= k <= cfg.depth:
            raise ValueError(f"RMA layer {k} outside 1..{cfg.depth}")
        lw = weights.layer(k - 1)
        pre = prefix(k)
        t[pre + "f2.weight"] = _f32(rng.normal(0.0, f2_std, size=(d, 1, p, p)))
        t[pre + "f2.bias"] = np.zeros(d)
        t[pre + "qm.weight"] = np.array(lw["attn.q.weight"])
        t[pre + "qm.bias"] = np.array(lw["attn.q.bias"])
        t[pre + "km.weight"] = np.array(lw["attn.k.weight"])
        t[pre + "km.bias"] = np.array(lw["attn.k.bias"])
        t[pre + "fr1.weight"] = _f32(rng.normal(0.0, 1.0 / np.sqrt(9 * d), size=(half, d, 3, 3)))
        t[pre + "fr1.bias"] = np.zeros(half)
        t[pre + "fr2.weight"] = np.zeros((1, half, 3, 3))
        t[pre + "fr2.bias"] = np.zeros(1)
    return RMAParams(tuple(layers), t)


# ------------------------------------------------------------------ pieces


def mask_patch_tokens(masks: np.ndarray, f2_weight: np.ndarray, f2_bias: np.ndarray) -> np.ndarray:
    """Patchify [M, H, W] masks with a strided conv -> [M, N, D], patches row-major."""
    masks = np.asarray(masks, dtype=np.float64)
    if masks.ndim == 2:
        masks = masks[None]
    p = f2_weight.shape[-1]
    out = nx.conv2d(masks[:, None], f2_weight, f2_bias, stride=p)
    m, d = out.shape[:2]
    return out.reshape(m, d, -1).transpose(0, 2, 1)


def relative_attention_logits(t_mp, t_im, qm_weight, qm_bias, km_weight, km_bias) -> np.ndarray:
    """[M, N] relative term: per (mask, patch) dot product of projected mask and image tokens."""
    qm = t_mp @ qm_weight + qm_bias
    km = t_im @ km_weight + km_bias
    return np.einsum("mnd,nd->mn", qm, km)


def combined_attention(t_mc, t_im, a_rel, q_weight, q_bias, k_weight, k_bias, heads: int) -> np.ndarray:
    """[heads, M, N] mask-token x image-token logits with the halved scale."""
    d = t_mc.shape[-1]
    if d % heads:
        raise ValueError(f"dim {d} not divisible by heads {heads}")
    dh = d // heads
    qh = _split_heads(t_mc @ q_weight + q_bias, heads)
    kh = _split_heads(t_im @ k_weight + k_bias, heads)
    return (qh @ kh.transpose(0, 2, 1) + a_rel[None]) / (2.0 * np.sqrt(dh))


def _refine(masks, q_mc, k_im, fr: Mapping[str, np.ndarray], eps: float):
    m, h, w = masks.shape
    n, d = k_im.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ValueError(f"patch grid with {n} tokens is not square")
    prod = q_mc[:, None, :] * k_im[None, :, :]  # M, N, D
    r = prod.transpose(0, 2, 1).reshape(m, d, g, g)
    z1 = nx.conv2d(r, fr["fr1.weight"], fr["fr1.bias"], padding=1)
    a1 = nx.gelu(z1)
    z2 = nx.conv2d(a1, fr["fr2.weight"], fr["fr2.bias"], padding=1)
    residual = nx.bilinear_resize(z2[:, 0], h, w)
    out = nx.shift_in_logit_space(masks, residual, eps)
    return out, dict(r=r, z1=z1, a1=a1, out=out)


def refine_mask(masks, t_mc, t_im, q_weight, q_bias, k_weight, k_bias, fr, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Refined masks sigmoid(logit(masks) + residual), residual from f_r over the query/key product."""
    masks = np.asarray(masks.masks if isinstance(masks, MaskSet) else masks, dtype=np.float64)
    out, _ = _refine(masks, t_mc @ q_weight + q_bias, t_im @ k_weight + k_bias, fr, eps)
    return out


# ------------------------------------------------------------------ forward


@dataclass
class RMAResult:
    mask_features: np.ndarray
    refined_masks: MaskSet
    class_feature: np.ndarray
    tokens: vit.TokenSequence
    per_layer_masks: dict[int, np.ndarray] = field(default_factory=dict)
    cache: dict | None = None


def rma_forward(
    image: np.ndarray,
    masks: MaskSet,
    weights: FrozenWeights,
    rma: RMAParams,
    config: ViTConfig | None = None,
    eps: float = DEFAULT_EPS,
    keep_cache: bool = False,
) -> RMAResult:
    """Full encoder forward with mask class tokens and RMA at ``rma.layers``.

    The refined mask of each RMA layer replaces the working mask: later layers
    use its occupancy for the attention mask and its patch tokens for the
    relative term.
    """
    cfg = weights.config if config is None else config
    rma.validate(cfg)
    check_geometry(image, masks, cfg)
    m, n, p, heads = len(masks), cfg.num_patches, cfg.patch_size, cfg.heads
    theta = masks.threshold
    cur = masks.masks.copy()
    occ = patch_occupancy(masks, p) if m else np.zeros((0, n), dtype=bool)

    vit._record_forward_pass()
    seq = vit.embed_tokens(image, weights, num_mask=m)
    layer_caches = []
    per_layer = {}
    for i in range(cfg.depth):
        k = i + 1
        lw = weights.layer(i)
        attn_mask = build_attention_mask(n, m, occ)
        lc = {} if keep_cache else None
        if k in rma.layers:
            prm = rma.layer(k)
            h, _ = nx.layer_norm(seq.tokens, lw["ln1.weight"], lw["ln1.bias"])
            t_mp = mask_patch_tokens(cur, prm["f2.weight"], prm["f2.bias"])
            qm = t_mp @ prm["qm.weight"] + prm["qm.bias"]
            km = h[:n] @ prm["km.weight"] + prm["km.bias"]
            a_rel = np.einsum("mnd,nd->mn", qm, km)
            seq = vit.attention_layer(seq, attn_mask, lw, heads, relative=RelativeBlock(a_rel), cache=lc)
            q_mc = h[n + 1 :] @ lw["attn.q.weight"] + lw["attn.q.bias"]
            k_im = h[:n] @ lw["attn.k.weight"] + lw["attn.k.bias"]
            new, rc = _refine(cur, q_mc, k_im, prm, eps)
            if keep_cache:
                lc["rma"] = dict(masks_in=cur, t_mp=t_mp, qm=qm, km=km, h_img=h[:n], k_im=k_im, **rc)
            cur = new
            per_layer[k] = cur
            if i < cfg.depth - 1 and m:
                occ = patch_occupancy(MaskSet(cur, theta), p)
        else:
            seq = vit.attention_layer(seq, attn_mask, lw, heads, cache=lc)
        layer_caches.append(lc)

    tail = seq.tokens[n:]
    z, ln_post = nx.layer_norm(tail, weights["ln_post.weight"], weights["ln_post.bias"])
    y = z @ weights["proj"]
    feats = nx.l2_normalize(y)
    cache = None
    if keep_cache:
        cache = dict(layers=layer_caches, y=y[1:], ln_post=(ln_post[0][1:], ln_post[1][1:]), n=n, eps=eps)
    return RMAResult(feats[1:], MaskSet(cur, theta), feats[0], seq, per_layer, cache)


# ------------------------------------------------------------------ backward


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, heads * dh)


def rma_backward(
    weights: FrozenWeights,
    rma: RMAParams,
    cache: dict,
    d_features: np.ndarray,
    d_masks: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradient of a scalar w.r.t. every RMA tensor.

    ``d_features`` is the gradient w.r.t. the L2-normalized mask features
    [M, out_dim]; ``d_masks`` w.r.t. the final refined masks [M, H, W].
    """
    cfg = weights.config
    n, eps, heads = cache["n"], cache["eps"], cfg.heads
    r = n + 1
    dh = cfg.dim // heads
    scale = 1.0 / np.sqrt(dh)
    grads = {name: np.zeros_like(v) for name, v in rma.tensors.items()}

    dy = nx.l2_normalize_backward(cache["y"], d_features)
    dz = dy @ weights["proj"].T
    dx = nx.layer_norm_backward(dz, cache["ln_post"], weights["ln_post.weight"])
    dmask = np.array(d_masks, dtype=np.float64)

    for i in reversed(range(cfg.depth)):
        k = i + 1
        lw = weights.layer(i)
        c = cache["layers"][i]
        is_rma = k in rma.layers

        # MLP branch
        da = dx @ lw["mlp.fc2.weight"].T
        du = nx.gelu_backward(c["u"][r:], da)
        dh2 = du @ lw["mlp.fc1.weight"].T
        xhat2, rstd2 = c["ln2"]
        dx1 = dx + nx.layer_norm_backward(dh2, (xhat2[r:], rstd2[r:]), lw["ln2.weight"])

        # attention branch, mask-token rows only
        doh = _split_heads(dx1 @ lw["attn.out.weight"].T, heads)
        if not np.array_equal(c["cols"], np.arange(r)):
            raise ValueError("backward expects attention over exactly the image and class tokens")
        vh = _split_heads(c["v"], heads)
        kh = _split_heads(c["k"], heads)
        probs = c["probs"][:, r:, :]
        ds = nx.softmax_backward(probs, doh @ vh.transpose(0, 2, 1))
        if is_rma:
            ds_img = ds[:, :, :n] * (0.5 * scale)
            dqh = ds_img @ kh[:, :n] + (ds[:, :, n : n + 1] * scale) @ kh[:, n : n + 1]
            d_arel = ds_img.sum(axis=0)
        else:
            dqh = (ds @ kh) * scale
        dq = _merge_heads(dqh)

        if is_rma:
            pre = prefix(k)
            prm = rma.layer(k)
            rc = c["rma"]
            g = int(round(np.sqrt(n)))
            m = rc["masks_in"].shape[0]

            # refinement head
            dzr = dmask * rc["out"] * (1.0 - rc["out"])
            dmask_in = nx.logit_clamped_backward(rc["masks_in"], dzr, eps)
            dz2 = nx.bilinear_resize_backward(dzr, g, g)[:, None]
            da1, grads[pre + "fr2.weight"], grads[pre + "fr2.bias"] = nx.conv2d_backward(
                dz2, rc["a1"], prm["fr2.weight"], padding=1
            )
            dz1 = nx.gelu_backward(rc["z1"], da1)
            dr, grads[pre + "fr1.weight"], grads[pre + "fr1.bias"] = nx.conv2d_backward(
                dz1, rc["r"], prm["fr1.weight"], padding=1
            )
            dprod = dr.reshape(m, cfg.dim, n).transpose(0, 2, 1)
            dq = dq + np.einsum("mnd,nd->md", dprod, rc["k_im"])

            # relative term
            dqm = d_arel[:, :, None] * rc["km"][None]
            grads[pre + "qm.weight"] = np.einsum("mnd,mne->de", rc["t_mp"], dqm)
            grads[pre + "qm.bias"] = dqm.sum(axis=(0, 1))
            dkm = np.einsum("mn,mnd->nd", d_arel, rc["qm"])
            grads[pre + "km.weight"] = rc["h_img"].T @ dkm
            grads[pre + "km.bias"] = dkm.sum(axis=0)
            dtmp = (dqm @ prm["qm.weight"].T).transpose(0, 2, 1).reshape(m, cfg.dim, g, g)
            dmf2, grads[pre + "f2.weight"], grads[pre + "f2.bias"] = nx.conv2d_backward(
                dtmp, rc["masks_in"][:, None], prm["f2.weight"], stride=cfg.patch_size
            )
            dmask = dmask_in + dmf2[:, 0]

        dhm = dq @ lw["attn.q.weight"].T
        xhat1, rstd1 = c["ln1"]
        dx = dx1 + nx.layer_norm_backward(dhm, (xhat1[r:], rstd1[r:]), lw["ln1.weight"])

    return grads
