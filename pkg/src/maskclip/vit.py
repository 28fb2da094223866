"""CLIP-style ViT visual encoder with an external boolean attention mask.

Linear layers use ``y = x @ W + b`` with ``W`` stored as (in, out).
Tokens are laid out as N image tokens, then the class token at index N,
then any mask class tokens at N + 1 onward.
"""
from __future__ import annotations

import contextlib
import hashlib
import threading
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 8
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    out_dim: int = 32

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def validate(self) -> "ViTConfig":
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 0 or min(self.image_size, self.patch_size, self.dim, self.heads, self.out_dim) < 1:
            raise ValueError(f"invalid config {self}")
        return self

    def as_dict(self) -> dict[str, int]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


TOY_CONFIG = ViTConfig()


def _hash_tensors(tensors: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def expected_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, p, hidden = config.dim, config.patch_size, config.mlp_ratio * config.dim
    shapes = {
        "patch_embed.weight": (d, 3, p, p),
        "class_embedding": (d,),
        "positional_embedding": (config.num_patches + 1, d),
        "ln_post.weight": (d,),
        "ln_post.bias": (d,),
        "proj": (d, config.out_dim),
    }
    for i in range(config.depth):
        pre = f"layers.{i}."
        for nm in ("ln1", "ln2"):
            shapes[pre + nm + ".weight"] = shapes[pre + nm + ".bias"] = (d,)
        for nm in ("q", "k", "v", "out"):
            shapes[pre + f"attn.{nm}.weight"] = (d, d)
            shapes[pre + f"attn.{nm}.bias"] = (d,)
        shapes[pre + "mlp.fc1.weight"] = (d, hidden)
        shapes[pre + "mlp.fc1.bias"] = (hidden,)
        shapes[pre + "mlp.fc2.weight"] = (hidden, d)
        shapes[pre + "mlp.fc2.bias"] = (d,)
    return shapes


@dataclass(frozen=True)
class FrozenWeights:
    """Read-only backbone weights. Arrays are flagged non-writeable on construction."""

    config: ViTConfig
    tensors: Mapping[str, np.ndarray]
    content_hash: str = field(default="", compare=False)

    def __post_init__(self):
        shapes = expected_shapes(self.config)
        missing = sorted(set(shapes) - set(self.tensors))
        if missing:
            raise ValueError(f"weights missing tensors {missing[:3]}{'...' if len(missing) > 3 else ''}")
        frozen = {}
        for name, arr in self.tensors.items():
            a = np.array(arr, dtype=np.float64, copy=True)
            if name in shapes and a.shape != shapes[name]:
                raise ValueError(f"tensor {name} has shape {a.shape}, expected {shapes[name]}")
            nx.check_finite(a, name)
            a.flags.writeable = False
            frozen[name] = a
        object.__setattr__(self, "tensors", frozen)
        object.__setattr__(self, "content_hash", _hash_tensors(frozen))
        layers = [{} for _ in range(self.config.depth)]
        for name, arr in frozen.items():
            if name.startswith("layers."):
                _, i, rest = name.split(".", 2)
                layers[int(i)][rest] = arr
        object.__setattr__(self, "_layers", layers)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def layer(self, i: int) -> dict[str, np.ndarray]:
        return self._layers[i]

    def current_hash(self) -> str:
        return _hash_tensors(self.tensors)


def _f32(a: np.ndarray) -> np.ndarray:
    # keep values float32-representable so the on-disk container round-trips bit-exactly
    return a.astype(np.float32).astype(np.float64)


def init_weights(config: ViTConfig = TOY_CONFIG, seed: int = 0) -> FrozenWeights:
    """Seeded stand-in for a pretrained backbone."""
    config.validate()
    rng = np.random.default_rng(seed)
    d, p, hidden = config.dim, config.patch_size, config.mlp_ratio * config.dim

    def normal(shape, std):
        return _f32(rng.normal(0.0, std, size=shape))

    t = {
        "patch_embed.weight": normal((d, 3, p, p), 1.0 / np.sqrt(3 * p * p)),
        "class_embedding": normal((d,), 1.0),
        "positional_embedding": normal((config.num_patches + 1, d), 0.5),
    }
    for i in range(config.depth):
        pre = f"layers.{i}."
        for nm in ("ln1", "ln2"):
            t[pre + nm + ".weight"] = _f32(1.0 + rng.normal(0.0, 0.1, size=d))
            t[pre + nm + ".bias"] = normal((d,), 0.1)
        for nm in ("q", "k", "v", "out"):
            t[pre + f"attn.{nm}.weight"] = normal((d, d), 1.0 / np.sqrt(d))
            t[pre + f"attn.{nm}.bias"] = normal((d,), 0.1)
        t[pre + "mlp.fc1.weight"] = normal((d, hidden), 1.0 / np.sqrt(d))
        t[pre + "mlp.fc1.bias"] = normal((hidden,), 0.1)
        t[pre + "mlp.fc2.weight"] = normal((hidden, d), 1.0 / np.sqrt(hidden))
        t[pre + "mlp.fc2.bias"] = normal((d,), 0.1)
    t["ln_post.weight"] = _f32(1.0 + rng.normal(0.0, 0.1, size=d))
    t["ln_post.bias"] = normal((d,), 0.1)
    t["proj"] = normal((d, config.out_dim), 1.0 / np.sqrt(d))
    return FrozenWeights(config, t)


@dataclass
class TokenSequence:
    tokens: np.ndarray  # [(N + 1 + M), D]
    num_image: int

    @property
    def num_mask(self) -> int:
        return self.tokens.shape[0] - self.num_image - 1

    @property
    def image(self) -> np.ndarray:
        return self.tokens[: self.num_image]

    @property
    def cls(self) -> np.ndarray:
        return self.tokens[self.num_image]

    @property
    def mask(self) -> np.ndarray:
        return self.tokens[self.num_image + 1 :]

    @property
    def context(self) -> np.ndarray:
        """Image tokens plus the class token."""
        return self.tokens[: self.num_image + 1]


class ForwardCounter:
    """Counts full backbone forward passes started inside a ``counting()`` block."""

    def __init__(self):
        self.passes = 0


_counters = threading.local()


@contextlib.contextmanager
def counting():
    counter = ForwardCounter()
    stack = getattr(_counters, "stack", None)
    if stack is None:
        stack = _counters.stack = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _record_forward_pass() -> None:
    for c in getattr(_counters, "stack", ()):
        c.passes += 1


def patch_embed(image: np.ndarray, weights: FrozenWeights) -> np.ndarray:
    cfg = weights.config
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (3, cfg.image_size, cfg.image_size):
        raise ValueError(f"image shape {image.shape} != (3, {cfg.image_size}, {cfg.image_size})")
    out = nx.conv2d(image, weights["patch_embed.weight"], stride=cfg.patch_size)
    return out.reshape(cfg.dim, -1).T


def embed_tokens(image: np.ndarray, weights: FrozenWeights, num_mask: int = 0) -> TokenSequence:
    """Image tokens + positional embedding, class token, and ``num_mask`` copies of the class embedding."""
    img = patch_embed(image, weights)
    pos = weights["positional_embedding"]
    cls = weights["class_embedding"]
    n = img.shape[0]
    tokens = np.empty((n + 1 + num_mask, cls.shape[0]))
    tokens[:n] = img + pos[:n]
    tokens[n] = cls + pos[n]
    tokens[n + 1 :] = cls
    return TokenSequence(tokens, n)


@dataclass
class RelativeBlock:
    """Extra logits for the mask-token x image-token block of one layer.

    ``bias`` is the [M, N] relative term shared by every head; the block is
    scaled by ``1 / (2 sqrt(head_dim))`` instead of ``1 / sqrt(head_dim)``.
    """

    bias: np.ndarray


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, heads, d // heads).transpose(1, 0, 2)


def attention_layer(
    seq: TokenSequence,
    attn_mask: np.ndarray,
    lw: Mapping[str, np.ndarray],
    heads: int,
    relative: RelativeBlock | None = None,
    cache: dict | None = None,
) -> TokenSequence:
    """One pre-norm transformer block (attention + MLP, both residual).

    ``cache``, when given, is filled with the intermediates the hand-written
    backward in :mod:`maskclip.rma` consumes. Its ``k``, ``v`` and ``probs``
    cover only the attendable columns listed in ``cols``.
    """
    x = seq.tokens
    t, d = x.shape
    if attn_mask.shape != (t, t):
        raise ValueError(f"attention mask shape {attn_mask.shape} != {(t, t)}")
    n = seq.num_image
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    # keys/values are only needed for columns some row may attend; with mask
    # class tokens that is the N image tokens plus the class token
    cols = np.flatnonzero(~attn_mask.all(axis=0))

    h, ln1 = nx.layer_norm(x, lw["ln1.weight"], lw["ln1.bias"])
    hc = h[cols]
    q = h @ lw["attn.q.weight"] + lw["attn.q.bias"]
    k = hc @ lw["attn.k.weight"] + lw["attn.k.bias"]
    v = hc @ lw["attn.v.weight"] + lw["attn.v.bias"]
    qh, kh, vh = (_split_heads(a, heads) for a in (q, k, v))
    logits = (qh @ kh.transpose(0, 2, 1)) * scale
    if relative is not None:
        img = np.flatnonzero(cols < n)
        raw = qh[:, n + 1 :] @ kh[:, img].transpose(0, 2, 1)
        logits[:, n + 1 :, img] = (raw + relative.bias[None][:, :, cols[img]]) * (0.5 * scale)
    probs = nx.masked_softmax(logits, attn_mask[:, cols])
    o = (probs @ vh).transpose(1, 0, 2).reshape(t, d)
    x1 = x + o @ lw["attn.out.weight"] + lw["attn.out.bias"]

    h2, ln2 = nx.layer_norm(x1, lw["ln2.weight"], lw["ln2.bias"])
    u = h2 @ lw["mlp.fc1.weight"] + lw["mlp.fc1.bias"]
    x2 = x1 + nx.gelu(u) @ lw["mlp.fc2.weight"] + lw["mlp.fc2.bias"]
    nx.check_finite(x2, "layer output")
    if cache is not None:
        cache.update(h=h, ln1=ln1, q=q, k=k, v=v, cols=cols, probs=probs, x1=x1, ln2=ln2, u=u)
    return TokenSequence(x2, n)


def project(tokens: np.ndarray, weights: FrozenWeights) -> np.ndarray:
    """Final layer norm, projection and L2 normalization, row-wise."""
    z, _ = nx.layer_norm(tokens, weights["ln_post.weight"], weights["ln_post.bias"])
    return nx.l2_normalize(z @ weights["proj"])


def encode(image: np.ndarray, weights: FrozenWeights, config: ViTConfig | None = None):
    """Plain forward with no mask tokens. Returns ``(class_feature, tokens)``."""
    cfg = weights.config if config is None else config
    _record_forward_pass()
    seq = embed_tokens(image, weights)
    mask = np.zeros((seq.tokens.shape[0],) * 2, dtype=bool)
    for i in range(cfg.depth):
        seq = attention_layer(seq, mask, weights.layer(i), cfg.heads)
    return project(seq.cls[None], weights)[0], seq
