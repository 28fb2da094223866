"""Segmentation losses, proposal/ground-truth matching and the toy RMA fitting loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import numerics as nx
from .mask_tokens import MaskSet
from .pipeline import DEFAULT_TAU, EmbeddingTable
from .rma import DEFAULT_EPS, RMAParams, rma_backward, rma_forward
from .vit import FrozenWeights

log = logging.getLogger(__name__)

DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    ce: float = 2.0
    dice: float = 5.0
    bce: float = 5.0

    def __post_init__(self):
        if min(self.ce, self.dice, self.bce) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    num_proposals: int

    @property
    def unmatched(self) -> list[int]:
        hit = {p for p, _ in self.pairs}
        return [i for i in range(self.num_proposals) if i not in hit]

    def target_of(self, proposal: int) -> int | None:
        for p, g in self.pairs:
            if p == proposal:
                return g
        return None


# ------------------------------------------------------------------ losses


def dice_loss(pred: np.ndarray, gt: np.ndarray, smooth: float = DICE_SMOOTH) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    sp, sg = pred.sum(), gt.sum()
    if sp == 0 and sg == 0:
        return 0.0
    return float(1.0 - 2.0 * (pred * gt).sum() / (sp + sg + smooth))


def dice_loss_grad(pred: np.ndarray, gt: np.ndarray, smooth: float = DICE_SMOOTH) -> np.ndarray:
    sp, sg = pred.sum(), gt.sum()
    if sp == 0 and sg == 0:
        return np.zeros_like(pred)
    den = sp + sg + smooth
    inter = (pred * gt).sum()
    return -2.0 * (gt * den - inter) / (den * den)


def bce_loss(pred: np.ndarray, gt: np.ndarray, eps: float = DEFAULT_EPS) -> float:
    p = np.clip(np.asarray(pred, dtype=np.float64), eps, 1.0 - eps)
    gt = np.asarray(gt, dtype=np.float64)
    return float(-(gt * np.log(p) + (1.0 - gt) * np.log1p(-p)).mean())


def bce_loss_grad(pred: np.ndarray, gt: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    inside = (pred > eps) & (pred < 1.0 - eps)
    p = np.where(inside, pred, 0.5)
    return np.where(inside, (p - gt) / (p * (1.0 - p)), 0.0) / pred.size


def ce_loss(scores: np.ndarray, target: int) -> float:
    return float(-np.log(scores[target]))


def scores_with_no_object(features: np.ndarray, table: EmbeddingTable, tau: float = DEFAULT_TAU):
    """Softmax over C table logits plus a constant-zero no-object logit -> [M, C + 1]."""
    logits = tau * np.atleast_2d(features) @ table.matrix.T
    logits = np.concatenate([logits, np.zeros((logits.shape[0], 1))], axis=1)
    return nx.masked_softmax(logits)


# ------------------------------------------------------------------ matching


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a) >= 0.5, np.asarray(b) >= 0.5
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 0.0


def match_cost(proposals: np.ndarray, gts: np.ndarray, w: LossWeights = LossWeights()) -> np.ndarray:
    cost = np.zeros((len(proposals), len(gts)))
    for i, p in enumerate(proposals):
        for j, g in enumerate(gts):
            cost[i, j] = w.bce * bce_loss(p, g) + w.dice * dice_loss(p, g)
    return cost


def assign(cost: np.ndarray) -> list[tuple[int, int]]:
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def match_proposals(
    proposals: np.ndarray,
    gts: np.ndarray,
    w: LossWeights = LossWeights(),
    min_iou: float = 0.1,
) -> MatchResult:
    """Minimum-cost one-to-one assignment; pairs under ``min_iou`` are left unmatched."""
    proposals, gts = np.asarray(proposals), np.asarray(gts)
    if len(proposals) == 0 or len(gts) == 0:
        return MatchResult([], len(proposals))
    pairs = [(p, g) for p, g in assign(match_cost(proposals, gts, w)) if mask_iou(proposals[p], gts[g]) >= min_iou]
    return MatchResult(pairs, len(proposals))


# ------------------------------------------------------------------ total loss


def total_loss(
    pred_masks: np.ndarray,
    scores: np.ndarray,
    match: MatchResult,
    gt_masks: np.ndarray,
    gt_labels: Sequence[int],
    w: LossWeights = LossWeights(),
) -> float:
    """Weighted sum: mean CE over all proposals (unmatched -> no-object, the last
    column of ``scores``) plus dice and BCE summed over matched pairs."""
    no_obj = scores.shape[1] - 1
    targets = [no_obj] * len(pred_masks)
    for p, g in match.pairs:
        targets[p] = gt_labels[g]
    ce = np.mean([ce_loss(scores[i], t) for i, t in enumerate(targets)]) if len(targets) else 0.0
    dice = sum(dice_loss(pred_masks[p], gt_masks[g]) for p, g in match.pairs)
    bce = sum(bce_loss(pred_masks[p], gt_masks[g]) for p, g in match.pairs)
    return float(w.ce * ce + w.dice * dice + w.bce * bce)


@dataclass
class Sample:
    image: np.ndarray
    proposals: MaskSet
    gt_masks: np.ndarray
    gt_labels: list[int]
    match: MatchResult | None = None

    def matched(self, w: LossWeights = LossWeights()) -> MatchResult:
        # matching is fixed per sample, computed on the input proposals
        if self.match is None:
            self.match = match_proposals(self.proposals.masks, self.gt_masks, w)
        return self.match


def loss_and_grad(
    sample: Sample,
    weights: FrozenWeights,
    rma: RMAParams,
    table: EmbeddingTable,
    w: LossWeights = LossWeights(),
    tau: float = DEFAULT_TAU,
    eps: float = DEFAULT_EPS,
    need_grad: bool = True,
):
    """Total loss of one sample and its gradient w.r.t. every RMA tensor."""
    match = sample.matched(w)
    res = rma_forward(sample.image, sample.proposals, weights, rma, eps=eps, keep_cache=need_grad)
    feats, pred = res.mask_features, res.refined_masks.masks
    scores = scores_with_no_object(feats, table, tau)
    loss = total_loss(pred, scores, match, sample.gt_masks, sample.gt_labels, w)
    if not need_grad:
        return loss, None, res

    m = len(pred)
    onehot = np.zeros_like(scores)
    onehot[:, -1] = 1.0
    for p, g in match.pairs:
        onehot[p, -1] = 0.0
        onehot[p, sample.gt_labels[g]] = 1.0
    d_logits = (scores - onehot) * (w.ce / max(m, 1))
    d_feats = tau * d_logits[:, :-1] @ table.matrix
    d_masks = np.zeros_like(pred)
    for p, g in match.pairs:
        d_masks[p] += w.dice * dice_loss_grad(pred[p], sample.gt_masks[g])
        d_masks[p] += w.bce * bce_loss_grad(pred[p], sample.gt_masks[g], eps)
    grads = rma_backward(weights, rma, res.cache, d_feats, d_masks)
    return loss, grads, res


@dataclass
class FitResult:
    params: RMAParams
    losses: list[float] = field(default_factory=list)


class AdamW:
    """Adam with decoupled weight decay, one moment pair per tensor name."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        self.t += 1
        for k, g in grads.items():
            m = self.m[k] = b1 * self.m.get(k, 0.0) + (1 - b1) * g
            v = self.v[k] = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p = params[k]
            if self.weight_decay:
                p = p - self.lr * self.weight_decay * p
            params[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr, self.weight_decay = lr, weight_decay

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            p = params[k]
            if self.weight_decay:
                p = p - self.lr * self.weight_decay * p
            params[k] = p - self.lr * g


def fit(
    dataset: Sequence[Sample],
    weights: FrozenWeights,
    rma: RMAParams,
    table: EmbeddingTable,
    steps: int = 200,
    lr: float = 1e-4,
    weight_decay: float = 0.0,
    optimizer: str = "adamw",
    w: LossWeights = LossWeights(),
    tau: float = DEFAULT_TAU,
    eps: float = DEFAULT_EPS,
) -> FitResult:
    """Full-batch optimization of the mean sample loss over the RMA tensors only.

    ``losses[s]`` is the loss evaluated before update ``s``; one extra entry
    holds the loss after the last update. ``optimizer`` is ``"adamw"`` or ``"sgd"``.
    """
    if optimizer == "adamw":
        opt = AdamW(lr, weight_decay=weight_decay)
    elif optimizer == "sgd":
        opt = SGD(lr, weight_decay=weight_decay)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    params = rma.copy()
    losses = []
    scale = 1.0 / max(len(dataset), 1)
    for step in range(steps + 1):
        need = step < steps and lr != 0.0
        total, acc = 0.0, {k: np.zeros_like(v) for k, v in params.tensors.items()}
        for sample in dataset:
            loss, grads, _ = loss_and_grad(sample, weights, params, table, w, tau, eps, need_grad=need)
            total += loss
            if need:
                for k in acc:
                    acc[k] += grads[k] * scale
        mean = total * scale
        if not np.isfinite(mean):
            raise FloatingPointError(f"non-finite loss at step {step}")
        losses.append(mean)
        if step % 20 == 0:
            log.info("step %d loss %.6f", step, mean)
        if not need:
            if lr == 0.0:
                losses.extend([mean] * (steps - step))
            break
        opt.step(params.tensors, acc)
    return FitResult(params, losses)
