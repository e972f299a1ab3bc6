"""Grounding objective: L1 + generalized IoU on Hungarian-matched boxes,
plus group cross-entropy and per-actor binary cross-entropy, accumulated
over every decoder layer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .config import LossWeights
from .tensor import ContractError, Tensor


# -- box geometry ------------------------------------------------------------

def cxcywh_to_corners(boxes):
    """(cx, cy, w, h) -> (x1, y1, x2, y2); works on arrays and Tensors."""
    if isinstance(boxes, Tensor):
        cx, cy = boxes[..., 0:1], boxes[..., 1:2]
        w, h = boxes[..., 2:3], boxes[..., 3:4]
        half_w, half_h = T.mul(w, 0.5), T.mul(h, 0.5)
        return T.concat([T.sub(cx, half_w), T.sub(cy, half_h),
                         T.add(cx, half_w), T.add(cy, half_h)], axis=-1)
    boxes = np.asarray(boxes, dtype=np.float64)
    out = np.empty_like(boxes)
    out[..., 0] = boxes[..., 0] - boxes[..., 2] / 2
    out[..., 1] = boxes[..., 1] - boxes[..., 3] / 2
    out[..., 2] = boxes[..., 0] + boxes[..., 2] / 2
    out[..., 3] = boxes[..., 1] + boxes[..., 3] / 2
    return out


def giou_corners(a, b) -> float:
    """Generalized IoU of two corner-form boxes; exact scalar arithmetic."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if area_a <= 0 or area_b <= 0:
        raise ContractError("degenerate (zero-area) box")
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = area_a + area_b - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / union - (hull - union) / hull


def giou(a, b) -> float:
    """Generalized IoU of two (cx, cy, w, h) boxes, in (-1, 1]."""
    return giou_corners(cxcywh_to_corners(a), cxcywh_to_corners(b))


def giou_matrix(pred_cxcywh: np.ndarray, gt_cxcywh: np.ndarray) -> np.ndarray:
    """Pairwise gIoU, pred [N, 4] x gt [M, 4] -> [M, N]."""
    p = cxcywh_to_corners(pred_cxcywh)[None, :, :]
    g = cxcywh_to_corners(gt_cxcywh)[:, None, :]
    area_p = (p[..., 2] - p[..., 0]) * (p[..., 3] - p[..., 1])
    area_g = (g[..., 2] - g[..., 0]) * (g[..., 3] - g[..., 1])
    iw = np.clip(np.minimum(p[..., 2], g[..., 2]) - np.maximum(p[..., 0], g[..., 0]), 0, None)
    ih = np.clip(np.minimum(p[..., 3], g[..., 3]) - np.maximum(p[..., 1], g[..., 1]), 0, None)
    inter = iw * ih
    union = area_p + area_g - inter
    hull = ((np.maximum(p[..., 2], g[..., 2]) - np.minimum(p[..., 0], g[..., 0]))
            * (np.maximum(p[..., 3], g[..., 3]) - np.minimum(p[..., 1], g[..., 1])))
    return inter / union - (hull - union) / hull


# -- differentiable losses ---------------------------------------------------

def _giou_tensor(pred_corners: Tensor, gt_corners: Tensor) -> Tensor:
    """Pairwise (already matched) gIoU, [..., 4] x [..., 4] -> [...]."""
    px1, py1 = pred_corners[..., 0], pred_corners[..., 1]
    px2, py2 = pred_corners[..., 2], pred_corners[..., 3]
    gx1, gy1 = gt_corners[..., 0], gt_corners[..., 1]
    gx2, gy2 = gt_corners[..., 2], gt_corners[..., 3]
    area_p = T.mul(T.sub(px2, px1), T.sub(py2, py1))
    area_g = T.mul(T.sub(gx2, gx1), T.sub(gy2, gy1))
    zero = Tensor(np.zeros(area_p.shape))
    iw = T.maximum(T.sub(T.minimum(px2, gx2), T.maximum(px1, gx1)), zero)
    ih = T.maximum(T.sub(T.minimum(py2, gy2), T.maximum(py1, gy1)), zero)
    inter = T.mul(iw, ih)
    union = T.sub(T.add(area_p, area_g), inter)
    hull = T.mul(T.sub(T.maximum(px2, gx2), T.minimum(px1, gx1)),
                 T.sub(T.maximum(py2, gy2), T.minimum(py1, gy1)))
    return T.sub(T.div(inter, union), T.div(T.sub(hull, union), hull))


def giou_loss(pred: Tensor, gt) -> Tensor:
    """Mean of (1 - gIoU) over matched (cx, cy, w, h) pairs [..., P, 4]."""
    if _pair_count(pred) == 0:
        warnings.warn("giou_loss on empty match set, returning 0")
        return Tensor(np.zeros(()))
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=np.float64))
    g = _giou_tensor(cxcywh_to_corners(pred), cxcywh_to_corners(gt))
    return T.tmean(T.sub(1.0, g))


def l1_loss(pred: Tensor, gt) -> Tensor:
    """Mean absolute coordinate difference over matched pairs."""
    if _pair_count(pred) == 0:
        warnings.warn("l1_loss on empty match set, returning 0")
        return Tensor(np.zeros(()))
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=np.float64))
    return T.tmean(T.absolute(T.sub(pred, gt)))


def _pair_count(x) -> int:
    shape = x.shape
    return int(np.prod(shape[:-1])) if len(shape) else 0


# -- matching ----------------------------------------------------------------

@dataclass
class MatchResult:
    """Injective map from ground-truth indices to prediction indices."""
    gt_indices: np.ndarray
    pred_indices: np.ndarray
    total_cost: float

    def pairs(self):
        return list(zip(self.gt_indices.tolist(), self.pred_indices.tolist()))


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Exact minimum-cost assignment of M ground truths to N predictions."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {cost.shape}")
    m, n = cost.shape
    if m > n:
        raise ContractError(f"more ground truths ({m}) than predictions ({n})")
    if not np.isfinite(cost).all():
        raise ContractError("non-finite entries in cost matrix")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(rows)
    rows, cols = rows[order], cols[order]
    return MatchResult(rows, cols, float(cost[rows, cols].sum()))


def match_cost(pred_boxes: np.ndarray, pred_action_logits: Optional[np.ndarray],
               gt_boxes: np.ndarray, gt_actions: Optional[Sequence[Sequence[int]]],
               weights: LossWeights, weak: bool = False) -> np.ndarray:
    """Pairwise matching cost [M, N] on keyframe boxes.

    cost(i, j) = l1_weight * |b_i - bhat_j|_1 + giou_weight * (1 - gIoU)
                 [+ bce_weight * mean over gt actions of (1 - sigmoid(logit))]
    The action term is dropped in weakly supervised mode.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    l1 = np.abs(gt_boxes[:, None, :] - pred_boxes[None, :, :]).sum(axis=-1)
    cost = weights.l1 * l1 + weights.giou * (1.0 - giou_matrix(pred_boxes, gt_boxes))
    if (not weak and weights.action_bce > 0 and pred_action_logits is not None
            and gt_actions is not None):
        probs = 1.0 / (1.0 + np.exp(-np.asarray(pred_action_logits,
                                                dtype=np.float64)))
        for i, actions in enumerate(gt_actions):
            if actions:
                cost[i] += weights.action_bce * (1.0 - probs[:, list(actions)].mean(axis=-1))
    return cost


# -- classification terms ----------------------------------------------------

def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Single-label CE from raw logits [G]."""
    return T.mul(T.log_softmax(logits, axis=-1)[target], -1.0)


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean BCE over all entries; numerically stable softplus form."""
    y = Tensor(np.asarray(targets, dtype=np.float64))
    # bce = softplus(x) - x*y
    return T.tmean(T.sub(T.softplus(logits), T.mul(logits, y)))


# -- total objective ---------------------------------------------------------

def total_objective(decoder_out, annotation, weights: LossWeights,
                    keyframe: int, weak: bool = False,
                    fallback_boxes: Optional[Tensor] = None):
    """Eq.-style objective for one sample, accumulated over decoder layers.

    decoder_out: DecoderOutput with per-layer [1, N, T, 4] box tubes.
    annotation: SceneAnnotation with tubes sampled to the model's T frames.
    Returns (scalar Tensor, breakdown dict of python floats).
    """
    from .data import SceneAnnotation  # local import to avoid a cycle

    ann: SceneAnnotation = annotation
    if not ann.actors:
        raise ValueError(f"annotation {ann.clip_id} has no actor boxes")
    gt_tubes = np.stack([a.tube for a in ann.actors])        # [M, T, 4]
    gt_key = gt_tubes[:, keyframe, :]
    gt_actions = [sorted(a.actions) for a in ann.actors]
    if weak:
        gt_actions = [[] for _ in ann.actors]

    layer_boxes = decoder_out.per_layer_boxes
    if not layer_boxes and fallback_boxes is not None:
        layer_boxes = [fallback_boxes]

    total = Tensor(np.zeros(()))
    breakdown = {"l1": 0.0, "giou": 0.0, "group_ce": 0.0, "action_bce": 0.0}
    match = None
    for li, boxes in enumerate(layer_boxes):
        if not weights.aux_layers and li < len(layer_boxes) - 1:
            continue
        b = boxes.data[0]                                    # [N, T, 4]
        act_logits = (decoder_out.action_logits.data[0]
                      if decoder_out.action_logits is not None else None)
        cost = match_cost(b[:, keyframe, :], act_logits, gt_key,
                          gt_actions, weights, weak=weak)
        match = hungarian_match(cost)
        pred_idx = match.pred_indices
        matched_pred = boxes[0, pred_idx, :, :]              # [M, T, 4]
        l1 = l1_loss(matched_pred, gt_tubes)
        gl = giou_loss(T.reshape(matched_pred, (-1, 4)),
                       gt_tubes.reshape(-1, 4))
        total = T.add(total, T.add(T.mul(l1, weights.l1),
                                   T.mul(gl, weights.giou)))
        breakdown["l1"] += l1.item()
        breakdown["giou"] += gl.item()

    if weights.group_ce > 0 and ann.group_activity is not None:
        ce = cross_entropy(decoder_out.group_logits[0], ann.group_activity)
        total = T.add(total, T.mul(ce, weights.group_ce))
        breakdown["group_ce"] = ce.item()

    if not weak and weights.action_bce > 0 and match is not None:
        n, a = decoder_out.action_logits.shape[1:]
        targets = np.zeros((n, a))
        for gt_i, pred_j in match.pairs():
            for act in gt_actions[gt_i]:
                targets[pred_j, act] = 1.0
        bce = binary_cross_entropy_with_logits(decoder_out.action_logits[0],
                                               targets)
        total = T.add(total, T.mul(bce, weights.action_bce))
        breakdown["action_bce"] = bce.item()

    return total, breakdown
