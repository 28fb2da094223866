"""Seeded synthetic scenes: textured stuff bands with rectangle/ellipse things.

Each scene comes with disjoint ground-truth masks covering every pixel and
coarse proposals made by eroding or dilating each ground-truth mask by a
random radius and blurring the result.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import formats
from .mask_tokens import MaskSet, encode_with_mask_tokens
from .pipeline import EmbeddingTable, TableEntry
from .vit import FrozenWeights


@dataclass(frozen=True)
class Category:
    name: str
    is_thing: bool
    color: tuple[float, float, float]
    shape: str = ""  # things only: "rect" or "ellipse"


CATEGORIES = (
    Category("sky", False, (0.55, 0.75, 0.95)),
    Category("grass", False, (0.25, 0.6, 0.2)),
    Category("sand", False, (0.85, 0.75, 0.5)),
    Category("red box", True, (0.85, 0.15, 0.1), "rect"),
    Category("yellow disc", True, (0.95, 0.9, 0.1), "ellipse"),
    Category("violet box", True, (0.5, 0.2, 0.7), "rect"),
)
STUFF = [i for i, c in enumerate(CATEGORIES) if not c.is_thing]
THINGS = [i for i, c in enumerate(CATEGORIES) if c.is_thing]


@dataclass
class Scene:
    image: np.ndarray  # [3, H, W], quantized to 8 bits
    gt_masks: np.ndarray  # [K, H, W] binary float
    labels: list[int]
    proposals: np.ndarray  # [K, H, W] soft


def _texture(rng, size, color, strength=0.08):
    yy, xx = np.mgrid[0:size, 0:size]
    freq = rng.uniform(0.2, 0.6)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(freq * (xx + 0.5 * yy) + phase)
    noise = rng.normal(0.0, 1.0, (size, size))
    base = np.asarray(color)[:, None, None]
    return base + strength * (0.6 * stripes + 0.4 * noise)[None]


def _shape_mask(kind, size, cy, cx, hh, hw):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "rect":
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    return ((yy - cy) / (hh + 0.5)) ** 2 + ((xx - cx) / (hw + 0.5)) ** 2 <= 1.0


def _coarsen(rng, mask, min_area):
    radius = int(rng.integers(1, 4))
    op = ndimage.binary_dilation if rng.random() < 0.5 else ndimage.binary_erosion
    out = op(mask, iterations=radius)
    while out.sum() < min_area and radius > 0:
        radius -= 1
        out = op(mask, iterations=radius) if radius else mask.copy()
    soft = ndimage.gaussian_filter(out.astype(np.float64), sigma=1.0)
    return np.clip(soft, 0.0, 1.0)


def _finish(rng, image, segments, min_area) -> Scene:
    image = np.clip(np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0, 0.0, 1.0)
    gts = np.stack([m for m, _ in segments]).astype(np.float64)
    labels = [c for _, c in segments]
    proposals = np.stack([_coarsen(rng, m, min_area) for m, _ in segments])
    return Scene(image, gts, labels, proposals)


def make_scene(rng: np.random.Generator, size: int = 64, max_things: int = 2, min_area: int = 16) -> Scene:
    """Two stuff regions split by a tilted line plus 1..max_things things."""
    top, bottom = rng.choice(STUFF, size=2, replace=False)
    yy, xx = np.mgrid[0:size, 0:size]
    split = rng.uniform(0.35, 0.65) * size + rng.uniform(-0.2, 0.2) * (xx - size / 2)
    upper = yy < split
    image = np.where(upper[None], _texture(rng, size, CATEGORIES[top].color),
                     _texture(rng, size, CATEGORIES[bottom].color))
    occupied = np.zeros((size, size), dtype=bool)
    things = []
    for _ in range(int(rng.integers(1, max_things + 1))):
        cat = int(rng.choice(THINGS))
        for _attempt in range(50):
            hh, hw = (int(v) for v in rng.integers(4, 9, size=2))
            cy = int(rng.integers(hh + 1, size - hh - 1))
            cx = int(rng.integers(hw + 1, size - hw - 1))
            m = _shape_mask(CATEGORIES[cat].shape, size, cy, cx, hh, hw)
            if not (ndimage.binary_dilation(m, iterations=2) & occupied).any():
                break
        else:
            continue
        occupied |= m
        image = np.where(m[None], _texture(rng, size, CATEGORIES[cat].color, 0.05), image)
        things.append((m, cat))
    # a stuff remainder below min_area is folded into the other stuff region
    regions = [(upper & ~occupied, int(top)), (~upper & ~occupied, int(bottom))]
    regions.sort(key=lambda rc: -int(rc[0].sum()))
    segments = [regions[0]]
    if regions[1][0].sum() >= min_area:
        segments.append(regions[1])
    else:
        segments[0] = (regions[0][0] | regions[1][0], regions[0][1])
    return _finish(rng, image, segments + things, min_area)


def make_prototype_scene(rng: np.random.Generator, size: int = 64, min_area: int = 16) -> Scene:
    """Every category exactly once: three stuff bands, one thing per band."""
    yy, xx = np.mgrid[0:size, 0:size]
    bands = [(yy < size // 3), (yy >= size // 3) & (yy < 2 * size // 3), (yy >= 2 * size // 3)]
    image = np.zeros((3, size, size))
    for band, cat in zip(bands, STUFF):
        image = np.where(band[None], _texture(rng, size, CATEGORIES[cat].color), image)
    occupied = np.zeros((size, size), dtype=bool)
    things = []
    band_h = size // 3
    for b, cat in enumerate(THINGS):
        cy = b * band_h + band_h // 2
        cx = int(size * (b + 1) / (len(THINGS) + 1))
        m = _shape_mask(CATEGORIES[cat].shape, size, cy, cx, band_h // 2 - 3, 5 + b)
        occupied |= m
        image = np.where(m[None], _texture(rng, size, CATEGORIES[cat].color, 0.05), image)
        things.append((m, cat))
    stuff = [(band & ~occupied, cat) for band, cat in zip(bands, STUFF)]
    return _finish(rng, image, stuff + things, min_area)


def build_table(scene: Scene, weights: FrozenWeights) -> EmbeddingTable:
    """Prototype table: the mask feature of each ground-truth region of ``scene``."""
    feats, _, _ = encode_with_mask_tokens(scene.image, MaskSet(scene.gt_masks).validate(), weights)
    by_cat = dict(zip(scene.labels, feats))
    return EmbeddingTable([TableEntry(c.name, c.is_thing, by_cat[i]) for i, c in enumerate(CATEGORIES)])


def write_sample(path, scene: Scene) -> None:
    path = Path(path)
    formats.write_image(path / "image.ppm", scene.image)
    formats.write_masks(path / "masks.mcm", scene.proposals)
    formats.write_masks(path / "gt_masks.mcm", scene.gt_masks)
    gt = {
        "categories": [CATEGORIES[c].name for c in scene.labels],
        "is_thing": [CATEGORIES[c].is_thing for c in scene.labels],
    }
    formats.atomic_write(path / "gt.json", (json.dumps(gt, indent=1) + "\n").encode())


def read_sample(path, table: EmbeddingTable):
    """Inverse of :func:`write_sample`, labels resolved against ``table``."""
    path = Path(path)
    image = formats.read_image(path / "image.ppm")
    props, theta = formats.read_masks(path / "masks.mcm")
    gts, _ = formats.read_masks(path / "gt_masks.mcm")
    gt = json.loads((path / "gt.json").read_text())
    labels = [table.index(n) for n in gt["categories"]]
    return image, MaskSet(props, theta), gts, labels
