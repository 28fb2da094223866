"""Open-vocabulary segmentation around the encoder: proposals, classification,
the per-mask crop-and-encode baseline, and panoptic merging."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import formats
from .mask_tokens import MaskSet
from .numerics import l2_normalize, masked_softmax
from .vit import FrozenWeights, encode

DEFAULT_TAU = 100.0
MIN_AREA = 16


@dataclass
class TableEntry:
    name: str
    is_thing: bool
    vector: np.ndarray


class EmbeddingTable:
    """C named unit vectors standing in for text embeddings of category names."""

    def __init__(self, entries: Sequence[TableEntry]):
        names = [e.name for e in entries]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ValueError(f"duplicate category names: {sorted(dupes)}")
        dims = {np.asarray(e.vector).shape for e in entries}
        if len(dims) > 1:
            raise ValueError(f"table vectors differ in shape: {sorted(dims)}")
        if any(not np.linalg.norm(np.asarray(e.vector, dtype=np.float64)) > 0 for e in entries):
            raise ValueError("table vectors must be non-zero")
        self.entries = [TableEntry(e.name, bool(e.is_thing), l2_normalize(np.asarray(e.vector, dtype=np.float64)))
                        for e in entries]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def matrix(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0))
        return np.stack([e.vector for e in self.entries])

    def index(self, name: str) -> int:
        return self.names.index(name)

    def is_thing(self, category: int) -> bool:
        return self.entries[category].is_thing

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        entries = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                entries.append(TableEntry(rec["name"], rec["is_thing"], rec["vector"]))
        return cls(entries)

    def dumps(self) -> str:
        return "".join(
            json.dumps({"name": e.name, "is_thing": e.is_thing, "vector": [float(v) for v in e.vector]}) + "\n"
            for e in self.entries
        )

    def save(self, path) -> None:
        formats.atomic_write(path, self.dumps().encode())


def classify(features: np.ndarray, table: EmbeddingTable, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Softmax over scaled dot products with every table vector -> [M, C]."""
    if len(table) == 0:
        raise ValueError("embedding table is empty")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return masked_softmax(tau * features @ table.matrix.T)


def clip_baseline(
    image: np.ndarray,
    masks: MaskSet,
    weights: FrozenWeights,
    table: EmbeddingTable,
    tau: float = DEFAULT_TAU,
) -> np.ndarray:
    """Mask the image once per proposal and encode each result separately (M full passes)."""
    feats = [encode(masks.masks[i][None] * image, weights)[0] for i in range(len(masks))]
    if not feats:
        return np.zeros((0, len(table)))
    return classify(np.stack(feats), table, tau)


# ------------------------------------------------------------------ proposals


def synthetic_proposals(
    image: np.ndarray,
    quantile: float = 0.5,
    tolerance: float = 0.1,
    min_area: int = MIN_AREA,
) -> np.ndarray:
    """Foreground blobs plus one background mask, as binary float masks [M, H, W].

    A pixel is foreground when any channel differs from that channel's
    ``quantile`` value by more than ``tolerance``. Components are 4-connected
    and must cover at least ``min_area`` pixels; everything else is background.
    """
    image = np.asarray(image, dtype=np.float64)
    ref = np.quantile(image.reshape(image.shape[0], -1), quantile, axis=1)
    fg = (np.abs(image - ref[:, None, None]) > tolerance).any(axis=0)
    labels, count = ndimage.label(fg)
    masks = []
    claimed = np.zeros(fg.shape, dtype=bool)
    for lab in range(1, count + 1):
        comp = labels == lab
        if comp.sum() >= min_area:
            masks.append(comp)
            claimed |= comp
    if (~claimed).any():
        masks.append(~claimed)
    if not masks:
        raise ValueError("proposer produced no masks")
    return np.stack(masks).astype(np.float64)


def propose_masks(source, image: np.ndarray | None = None, **kwargs) -> MaskSet:
    """Load masks from an MCM1 file or PGM directory, or run the synthetic proposer.

    Pass ``source="synthetic"`` (with ``image``) for the proposer.
    """
    if isinstance(source, str) and source == "synthetic":
        if image is None:
            raise ValueError("synthetic proposer needs an image")
        return MaskSet(synthetic_proposals(image, **kwargs)).validate()
    masks, theta = formats.read_masks(source)
    if masks.shape[0] == 0:
        raise ValueError(f"{source}: no mask proposals")
    return MaskSet(masks, theta).validate()


# ------------------------------------------------------------------ panoptic


@dataclass
class SegmentPrediction:
    mask: np.ndarray
    scores: np.ndarray

    @property
    def category(self) -> int:
        return int(np.argmax(self.scores))

    @property
    def confidence(self) -> float:
        return float(np.max(self.scores))


@dataclass
class Segment:
    category: int
    is_thing: bool
    confidence: float = 1.0


@dataclass
class PanopticMap:
    """Per-pixel segment ids (0 = void) and per-segment metadata keyed by id."""

    segment_id: np.ndarray
    segments: dict[int, Segment] = field(default_factory=dict)

    def __post_init__(self):
        self.segment_id = np.asarray(self.segment_id, dtype=np.int64)
        ids = set(np.unique(self.segment_id).tolist()) - {0}
        if ids - set(self.segments):
            raise ValueError(f"segment ids {sorted(ids - set(self.segments))} have no metadata")
        stuff = [s.category for s in self.segments.values() if not s.is_thing]
        if len(stuff) != len(set(stuff)):
            raise ValueError("a stuff category appears in more than one segment")

    @classmethod
    def from_masks(cls, masks: np.ndarray, categories: Sequence[int], is_thing: Sequence[bool],
                   confidences: Sequence[float] | None = None) -> "PanopticMap":
        """Build from disjoint binary masks; overlapping masks are an error."""
        masks = np.asarray(masks) >= 0.5
        if masks.shape[0] and masks.sum(axis=0).max() > 1:
            raise ValueError("segments overlap")
        seg = np.zeros(masks.shape[1:], dtype=np.int64)
        meta = {}
        stuff_ids: dict[int, int] = {}
        for i, m in enumerate(masks):
            if not is_thing[i] and categories[i] in stuff_ids:
                seg[m] = stuff_ids[categories[i]]
                continue
            sid = len(meta) + 1
            conf = 1.0 if confidences is None else float(confidences[i])
            meta[sid] = Segment(int(categories[i]), bool(is_thing[i]), conf)
            if not is_thing[i]:
                stuff_ids[categories[i]] = sid
            seg[m] = sid
        return cls(seg, meta)

    def semantic(self) -> np.ndarray:
        """Category per pixel, -1 for void."""
        lut = np.full(max(self.segments, default=0) + 1, -1, dtype=np.int64)
        for sid, s in self.segments.items():
            lut[sid] = s.category
        return lut[self.segment_id]

    def save(self, stem, table: EmbeddingTable | None = None) -> None:
        """Write ``<stem>.pgm`` (16-bit ids) and ``<stem>.json``."""
        stem = Path(stem)
        formats.atomic_write(stem.with_suffix(".pgm"), formats.encode_pnm(self.segment_id, 65535))
        recs = []
        for sid in sorted(self.segments):
            s = self.segments[sid]
            rec = {"id": sid, "category": s.category, "is_thing": s.is_thing, "confidence": s.confidence}
            if table is not None:
                rec["name"] = table.names[s.category]
            recs.append(rec)
        formats.atomic_write(stem.with_suffix(".json"), (json.dumps({"segments": recs}, indent=1) + "\n").encode())

    @classmethod
    def load(cls, stem) -> "PanopticMap":
        stem = Path(stem)
        ids = formats.read_pnm(stem.with_suffix(".pgm")).astype(np.int64)
        meta = json.loads(stem.with_suffix(".json").read_text())
        segs = {r["id"]: Segment(r["category"], r["is_thing"], r.get("confidence", 1.0)) for r in meta["segments"]}
        return cls(ids, segs)


def merge_panoptic(
    preds: Sequence[SegmentPrediction],
    table: EmbeddingTable,
    min_area: int = MIN_AREA,
    overlap_keep: float = 0.5,
) -> PanopticMap:
    """Greedy highest-confidence-first pixel assignment.

    A segment survives if at least ``overlap_keep`` of its binarized area and
    at least ``min_area`` pixels are still unclaimed when its turn comes.
    Stuff segments of one category share an id. Ties keep input order.
    """
    if not preds:
        raise ValueError("no predictions to merge")
    shape = np.asarray(preds[0].mask).shape
    seg = np.zeros(shape, dtype=np.int64)
    meta: dict[int, Segment] = {}
    stuff_ids: dict[int, int] = {}
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    for i in order:
        p = preds[i]
        binary = np.asarray(p.mask) >= 0.5
        area = int(binary.sum())
        if area == 0:
            continue
        keep = binary & (seg == 0)
        kept = int(keep.sum())
        if kept < overlap_keep * area or kept < min_area:
            continue
        cat = p.category
        thing = table.is_thing(cat)
        if not thing and cat in stuff_ids:
            seg[keep] = stuff_ids[cat]
            continue
        sid = len(meta) + 1
        meta[sid] = Segment(cat, thing, p.confidence)
        if not thing:
            stuff_ids[cat] = sid
        seg[keep] = sid
    return PanopticMap(seg, meta)



def segment(
    image: np.ndarray,
    masks: MaskSet,
    weights: FrozenWeights,
    table: EmbeddingTable,
    rma=None,
    tau: float = DEFAULT_TAU,
    eps: float = 1e-4,
    min_area: int = MIN_AREA,
):
    """Encode, classify and merge. Without ``rma`` (or with an empty layer set)
    this is the plain mask-class-token forward.

    Returns ``(panoptic_map, scores [M, C], final_masks [M, H, W])``.
    """
    from .mask_tokens import encode_with_mask_tokens
    from .rma import rma_forward

    masks.validate()
    if rma is None or not rma.layers:
        feats, _, _ = encode_with_mask_tokens(image, masks, weights)
        final = masks.masks
    else:
        res = rma_forward(image, masks, weights, rma, eps=eps)
        feats, final = res.mask_features, res.refined_masks.masks
    scores = classify(feats, table, tau)
    preds = [SegmentPrediction(final[i], scores[i]) for i in range(len(masks))]
    return merge_panoptic(preds, table, min_area=min_area), scores, final
