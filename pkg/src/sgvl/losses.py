"""Open-vocabulary set-prediction losses and contrastive objectives.

Predictions from object/relation token states are scored against ground
truth by a DETR-style bipartite matching: a cost matrix over (prediction,
slot) pairs, solved exactly by a Hungarian assignment, then a set loss at
the fixed optimal assignment. Classes are open vocabulary: probabilities
are a softmax over cosine similarities to text-embedded labels plus a
learned "no object" row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12

# cxcywh -> xyxy as a single linear map (rows: cx, cy, w, h)
_CXCYWH_TO_XYXY = np.array([
    [1.0, 0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0, 1.0],
    [-0.5, 0.0, 0.5, 0.0],
    [0.0, -0.5, 0.0, 0.5],
])


class PredictionHead:
    """Two FFNs over token states: boxes via sigmoid (cx, cy, w, h), and
    class embeddings via a linear output. Shared by object and relation
    tokens."""

    def __init__(self, d: int, rng: np.random.Generator, prefix: str = "head"):
        self.d = d
        self.params: List[Parameter] = []

        def linear(name, n_in, n_out):
            w = Parameter(f"{prefix}.{name}.w",
                          Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))))
            b = Parameter(f"{prefix}.{name}.b", Tensor(np.zeros(n_out)))
            self.params.extend([w, b])
            return w, b

        self.bb1 = linear("bb1", d, d)
        self.bb2 = linear("bb2", d, d)
        self.bb3 = linear("bb3", d, 4)
        self.e1 = linear("e1", d, d)
        self.e2 = linear("e2", d, d)
        self.e3 = linear("e3", d, d)

    @staticmethod
    def _ffn(x: Tensor, l1, l2, l3) -> Tensor:
        h = ad.gelu(ad.add(ad.matmul(x, l1[0].tensor), l1[1].tensor))
        h = ad.gelu(ad.add(ad.matmul(h, l2[0].tensor), l2[1].tensor))
        return ad.add(ad.matmul(h, l3[0].tensor), l3[1].tensor)

    def boxes(self, states: Tensor) -> Tensor:
        """(k, d) states -> (k, 4) boxes in (cx, cy, w, h), each in (0, 1)."""
        return ad.sigmoid(self._ffn(states, self.bb1, self.bb2, self.bb3))

    def embeds(self, states: Tensor) -> Tensor:
        """(k, d) states -> (k, d) class-embedding predictions."""
        return self._ffn(states, self.e1, self.e2, self.e3)


def box_cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    return ad.matmul(boxes, Tensor(_CXCYWH_TO_XYXY))


@dataclass
class SetTarget:
    """Ground truth for one side (objects or relations) of one image."""

    phrases: List[str]
    boxes: np.ndarray            # (k, 4) xyxy, normalized
    labels: Tensor               # (k + 1, d); last row is the learned empty class

    def __post_init__(self):
        if self.labels.shape[0] != len(self.phrases) + 1:
            raise ValueError("label matrix must have one row per phrase plus the empty row")


@dataclass
class SGTargets:
    """Full per-image supervision: object and relation target sets."""

    objects: SetTarget
    relations: SetTarget


@dataclass
class MatchResult:
    permutation: np.ndarray      # prediction index -> slot index
    pair_costs: np.ndarray       # cost of each matched pair
    total_cost: float


def class_probs(e_hat: Tensor, labels: Tensor) -> Tensor:
    """Softmax over cosine similarities between predictions and label rows.

    e_hat is (d,) or (k_pred, d); labels is (k + 1, d). Rows are normalized
    here, so a pre-normalized label matrix passes through unchanged.
    """
    single = len(e_hat.shape) == 1
    if single:
        e_hat = ad.reshape(e_hat, (1, -1))
    if np.any(np.linalg.norm(e_hat.data, axis=-1) == 0.0):
        raise ValueError("class_probs requires nonzero prediction embeddings")
    sims = ad.matmul(ad.normalize_rows(e_hat), ad.transpose(ad.normalize_rows(labels)))
    probs = ad.softmax(sims, axis=-1)
    return ad.reshape(probs, (-1,)) if single else probs


def giou(a, b) -> Tensor:
    """Generalized IoU over (..., 4) xyxy boxes, in [-1, 1].

    Works on arbitrary ordered boxes (no [0, 1] clamp). When both boxes are
    degenerate and coincident the hull has zero area; that case is defined
    as 0 with a warning.
    """
    a, b = ad.astensor(a), ad.astensor(b)
    ax0, ay0, ax1, ay1 = (a[..., i] for i in range(4))
    bx0, by0, bx1, by1 = (b[..., i] for i in range(4))

    iw = ad.maximum(ad.sub(ad.minimum(ax1, bx1), ad.maximum(ax0, bx0)), 0.0)
    ih = ad.maximum(ad.sub(ad.minimum(ay1, by1), ad.maximum(ay0, by0)), 0.0)
    inter = ad.mul(iw, ih)
    area_a = ad.mul(ad.sub(ax1, ax0), ad.sub(ay1, ay0))
    area_b = ad.mul(ad.sub(bx1, bx0), ad.sub(by1, by0))
    union = ad.sub(ad.add(area_a, area_b), inter)

    hull_w = ad.sub(ad.maximum(ax1, bx1), ad.minimum(ax0, bx0))
    hull_h = ad.sub(ad.maximum(ay1, by1), ad.minimum(ay0, by0))
    hull = ad.mul(hull_w, hull_h)

    iou = ad.div(inter, ad.maximum(union, PROB_CLAMP))
    penalty = ad.div(ad.sub(hull, union), ad.maximum(hull, PROB_CLAMP))
    out = ad.sub(iou, penalty)

    degenerate = hull.data <= 0.0
    if np.any(degenerate):
        logger.warning("giou: zero-area hull, defining giou = 0 for %d pair(s)",
                       int(np.count_nonzero(degenerate)))
        keep = (~degenerate).astype(float)
        out = ad.mul(out, Tensor(keep))
    return out


def giou_loss(a, b) -> Tensor:
    return ad.sub(1.0, giou(a, b))


def matching_cost(q_hat: np.ndarray, pred_boxes: np.ndarray,
                  gt_boxes: np.ndarray, n_real: int) -> np.ndarray:
    """(n_tokens, n_tokens) assignment cost; empty-padded slots cost zero.

    cost[j, i] for a real slot i is -q_hat[j, i] plus the GIoU loss and L1
    distance between boxes. The class term is negated so that likelier
    classes are cheaper, matching standard set-prediction practice.
    """
    n_tokens = q_hat.shape[0]
    if n_real > n_tokens:
        raise ValueError(f"more GT objects than object tokens: {n_real} > {n_tokens}")
    cost = np.zeros((n_tokens, n_tokens))
    if n_real == 0:
        return cost
    with_grad_off = np.asarray(pred_boxes, dtype=np.float64)
    pb = np.repeat(with_grad_off[:, None, :], n_real, axis=1)     # (tokens, real, 4)
    gb = np.broadcast_to(gt_boxes[None, :n_real, :], pb.shape)
    l_giou = giou_loss(pb, gb).data
    l1 = np.abs(pb - gb).sum(axis=-1)
    cost[:, :n_real] = -q_hat[:, :n_real] + l_giou + l1
    return cost


# --- Hungarian assignment ----------------------------------------------------


def _lap(cost: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """O(k^3) shortest-augmenting-path assignment with row/col potentials.

    Returns (perm, u, v) where perm[i] is the column of row i and u, v are
    dual potentials satisfying cost[i, j] - u[i] - v[j] >= 0 up to rounding.
    """
    k = cost.shape[0]
    INF = np.inf
    u = np.zeros(k + 1)
    v = np.zeros(k + 1)
    p = np.zeros(k + 1, dtype=np.int64)          # p[j] = row matched to column j (1-based)
    way = np.zeros(k + 1, dtype=np.int64)
    for i in range(1, k + 1):
        p[0] = i
        j0 = 0
        minv = np.full(k + 1, INF)
        used = np.zeros(k + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cols = ~used[1:]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            better = cols & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            free = np.flatnonzero(cols) + 1
            j1 = int(free[np.argmin(minv[free])])
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = np.zeros(k, dtype=np.int64)
    for j in range(1, k + 1):
        perm[p[j] - 1] = j - 1
    return perm, u[1:], v[1:]


def _lex_smallest_zero_matching(zero: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching using only zero edges.

    perm must already be a perfect matching inside the zero graph; rows are
    fixed in order, trying columns ascending, keeping feasibility via
    augmenting paths over the remaining rows.
    """
    k = zero.shape[0]
    col_of = perm.copy()
    row_of = np.empty(k, dtype=np.int64)
    row_of[perm] = np.arange(k)
    frozen_cols = np.zeros(k, dtype=bool)

    def try_augment(row: int, visited: np.ndarray) -> bool:
        for c in np.flatnonzero(zero[row]):
            if frozen_cols[c] or visited[c]:
                continue
            visited[c] = True
            if row_of[c] < 0 or try_augment(int(row_of[c]), visited):
                col_of[row] = c
                row_of[c] = row
                return True
        return False

    for i in range(k):
        current = int(col_of[i])
        for c in np.flatnonzero(zero[i]):
            c = int(c)
            if c >= current:
                break
            if frozen_cols[c]:
                continue
            displaced = int(row_of[c])
            # tentatively give column c to row i and rematch the displaced row
            saved_cols, saved_rows = col_of.copy(), row_of.copy()
            row_of[current] = -1
            col_of[i] = c
            row_of[c] = i
            visited = np.zeros(k, dtype=bool)
            visited[c] = True
            if try_augment(displaced, visited):
                current = c
                break
            col_of, row_of = saved_cols, saved_rows
        frozen_cols[int(col_of[i])] = True
    return col_of


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment; ties resolved to the lexicographically
    smallest permutation (read as the sequence perm[0], perm[1], ...)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    k = cost.shape[0]
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    perm, u, v = _lap(cost)
    reduced = cost - u[:, None] - v[None, :]
    tol = 1e-9 * (1.0 + np.abs(cost).max())
    zero = reduced <= tol
    zero[np.arange(k), perm] = True  # the found optimum is always admissible
    return _lex_smallest_zero_matching(zero, perm)


def assignment_result(cost: np.ndarray, perm: np.ndarray) -> MatchResult:
    pair = cost[np.arange(len(perm)), perm]
    return MatchResult(permutation=perm, pair_costs=pair, total_cost=float(pair.sum()))


# --- losses -------------------------------------------------------------------


def set_loss(q_hat: Tensor, pred_boxes_xyxy: Tensor, slot_classes: np.ndarray,
             slot_boxes: np.ndarray, real_mask: np.ndarray,
             sigma: np.ndarray) -> Tensor:
    """Matched-set loss at a fixed assignment.

    Every prediction pays a -log q term for its slot's class (including the
    empty class); box GIoU and L1 terms apply only to real slots.
    """
    cls_idx = slot_classes[sigma]
    picked = ad.take_along_rows(q_hat, cls_idx)
    if np.any(picked.data < PROB_CLAMP):
        logger.warning("set_loss: clamping %d matched probabilities below %.0e",
                       int(np.count_nonzero(picked.data < PROB_CLAMP)), PROB_CLAMP)
    loss = ad.scale(ad.sum_(ad.log(ad.maximum(picked, PROB_CLAMP))), -1.0)

    real_pred = np.flatnonzero(real_mask[sigma])
    if real_pred.size:
        pb = ad.gather_rows(pred_boxes_xyxy, real_pred)
        gb = slot_boxes[sigma[real_pred]]
        loss = ad.add(loss, ad.sum_(giou_loss(pb, Tensor(gb))))
        loss = ad.add(loss, ad.sum_(ad.absval(ad.sub(pb, Tensor(gb)))))
    return loss


def match_and_set_loss(e_hat: Tensor, pred_boxes_cxcywh: Tensor,
                       target: SetTarget) -> Tuple[Tensor, MatchResult]:
    """Full pipeline for one side of one image: probabilities, matching at
    detached values, then the differentiable loss at the fixed assignment."""
    n_tokens = e_hat.shape[0]
    n_real = len(target.phrases)
    q_hat = class_probs(e_hat, target.labels)
    boxes_xyxy = box_cxcywh_to_xyxy(pred_boxes_cxcywh)

    slot_classes = np.concatenate([np.arange(n_real),
                                   np.full(n_tokens - n_real, n_real)]).astype(np.int64)
    real_mask = np.concatenate([np.ones(n_real, dtype=bool),
                                np.zeros(n_tokens - n_real, dtype=bool)])
    slot_boxes = np.zeros((n_tokens, 4))
    if n_real:
        slot_boxes[:n_real] = target.boxes[:n_real]

    cost = matching_cost(q_hat.data, boxes_xyxy.data, slot_boxes, n_real)
    sigma = hungarian(cost)
    loss = set_loss(q_hat, boxes_xyxy, slot_classes, slot_boxes, real_mask, sigma)
    return loss, assignment_result(cost, sigma)


def contrastive_loss(image_embeds: Tensor, text_embeds: Tensor, logit_scale) -> Tensor:
    """Symmetric InfoNCE over the scaled cosine logit matrix.

    Rows must be L2-normalized; logit_scale may be a learnable scalar Tensor.
    """
    b = image_embeds.shape[0]
    if b == 0:
        raise ValueError("contrastive_loss requires a non-empty batch")
    if text_embeds.shape[0] != b:
        raise ValueError(f"batch mismatch: {b} images vs {text_embeds.shape[0]} texts")
    logits = ad.mul(ad.matmul(image_embeds, ad.transpose(text_embeds)), logit_scale)
    targets = np.arange(b)
    i2t = ad.mean(ad.cross_entropy(logits, targets))
    t2i = ad.mean(ad.cross_entropy(ad.transpose(logits), targets))
    return ad.scale(ad.add(i2t, t2i), 0.5)


def gn_loss(img: Tensor, pos: Tensor, neg: Tensor) -> Tensor:
    """Binary softmax pushing the image toward the positive caption.

    All three are d-vectors; similarity is cosine. Equal similarities give
    exactly ln 2.
    """
    img2 = ad.reshape(img, (1, -1))
    c_pos = cosine_pair(img2, pos)
    c_neg = cosine_pair(img2, neg)
    logits = ad.concat([c_pos, c_neg], axis=0)
    return ad.cross_entropy(logits, 0)


def cosine_pair(img2: Tensor, text: Tensor) -> Tensor:
    return ad.cosine_similarity(img2, ad.reshape(text, (1, -1)))


@dataclass
class LossBundle:
    l_cont: Tensor
    l_gn: Tensor
    l_obj: Tensor
    l_rel: Tensor
    l_sg: Tensor
    l_it: Tensor
    l_total: Tensor
    lambda_gn: float
    lambda_sg: float

    def log_dict(self, step: int) -> dict:
        return {
            "step": step,
            "l_cont": float(self.l_cont.data),
            "l_gn": float(self.l_gn.data),
            "l_obj": float(self.l_obj.data),
            "l_rel": float(self.l_rel.data),
            "l_total": float(self.l_total.data),
        }


def total_loss(l_cont: Tensor, l_gn: Tensor, l_obj: Tensor, l_rel: Tensor,
               lambda_gn: float, lambda_sg: float) -> LossBundle:
    """Weighted sum: contrastive plus graph negatives, plus the graph loss."""
    if lambda_gn < 0 or lambda_sg < 0:
        raise ValueError("loss weights must be non-negative")
    l_sg = ad.add(l_obj, l_rel)
    l_it = ad.add(l_cont, ad.scale(l_gn, lambda_gn))
    l_tot = ad.add(l_it, ad.scale(l_sg, lambda_sg))
    return LossBundle(l_cont=l_cont, l_gn=l_gn, l_obj=l_obj, l_rel=l_rel,
                      l_sg=l_sg, l_it=l_it, l_total=l_tot,
                      lambda_gn=lambda_gn, lambda_sg=lambda_sg)
