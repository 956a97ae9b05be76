"""Matching proposals to ground-truth boxes, and the training loss.

Proposal ``i`` is the prediction made from superpoint ``i``.  The masked
cost keeps, for every ground-truth box, only its ``j`` nearest superpoints;
all other entries are infinite and are carried as a boolean mask so that no
arithmetic ever touches them.
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import Box3D, BoxBatch, diou_distance, diou_distance_t
from .superpoint import SuperpointPartition, nearest_superpoints
from .tensor import Tensor

DEFAULT_LAMBDA = 0.25
DEFAULT_BETA = 0.5
DEFAULT_J = 3


def cost(p: np.ndarray, c_k: int, b: Box3D, b_hat: Box3D, lam: float = DEFAULT_LAMBDA) -> float:
    """``-lam * p[c_k] + diou_distance(b, b_hat)``; lower is better."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= c_k < p.shape[0]:
        raise IndexError(f"class index {c_k} out of range for {p.shape[0]} scores")
    return -lam * float(p[c_k]) + diou_distance(b, b_hat)


@dataclass(frozen=True)
class CostMatrix:
    """(M, K) costs; ``finite[i, k]`` is False where the entry is +inf."""

    values: np.ndarray
    finite: np.ndarray
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if self.values.shape != self.finite.shape or self.values.ndim != 2:
            raise ValueError("cost values and mask must be matching 2-D arrays")
        if not np.all(np.isfinite(self.values[self.finite])):
            raise ValueError("entries marked finite must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def dense(cls, values, lam: float = DEFAULT_LAMBDA) -> "CostMatrix":
        values = np.asarray(values, dtype=np.float64)
        finite = np.isfinite(values)
        return cls(np.where(finite, values, np.inf), finite, lam)


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[int, int], ...]  # (proposal, gt), sorted

    def __post_init__(self):
        props = [p for p, _ in self.pairs]
        gts = [g for _, g in self.pairs]
        if len(set(props)) != len(props) or len(set(gts)) != len(gts):
            raise ValueError("a matching must be injective in both proposals and gts")
        object.__setattr__(self, "pairs", tuple(sorted((int(p), int(g)) for p, g in self.pairs)))

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def proposals(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gts(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)

    def total_cost(self, cm: CostMatrix | np.ndarray) -> float:
        values = cm.values if isinstance(cm, CostMatrix) else np.asarray(cm)
        # correctly rounded, so the result does not depend on pair order
        return math.fsum(float(values[p, g]) for p, g in self.pairs)


# ------------------------------------------------------------------ cost matrices


def _diou_pairs(pred: BoxBatch, rows: np.ndarray, gt: BoxBatch, cols: np.ndarray) -> np.ndarray:
    if rows.size == 0:
        return np.zeros(0)
    with T.no_grad():
        a = BoxBatch(
            T.tensor(pred.center.data[rows]), T.tensor(pred.size.data[rows]),
            T.tensor(pred.cos.data[rows]), T.tensor(pred.sin.data[rows]),
        )
        b = BoxBatch(
            T.tensor(gt.center.data[cols]), T.tensor(gt.size.data[cols]),
            T.tensor(gt.cos.data[cols]), T.tensor(gt.sin.data[cols]),
        )
        return diou_distance_t(a, b).data.copy()


def _as_batch(boxes) -> BoxBatch:
    return boxes if isinstance(boxes, BoxBatch) else BoxBatch.from_boxes(list(boxes))


def candidate_mask(partition: SuperpointPartition, gt_boxes: Sequence[Box3D], j: int = DEFAULT_J) -> np.ndarray:
    """(M, K) mask of each gt's ``min(M, j)`` nearest superpoints."""
    mask = np.zeros((partition.num_superpoints, len(gt_boxes)), dtype=bool)
    for k, box in enumerate(gt_boxes):
        mask[nearest_superpoints(partition, box, j), k] = True
    return mask


def _fill_costs(probs, pred_boxes, gt_boxes, gt_labels, mask, lam) -> CostMatrix:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    probs = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    rows, cols = np.nonzero(mask)
    values = np.full(mask.shape, np.inf)
    if rows.size:
        dist = _diou_pairs(_as_batch(pred_boxes), rows, BoxBatch.from_boxes(list(gt_boxes)), cols)
        values[rows, cols] = -lam * probs[rows, gt_labels[cols]] + dist
    return CostMatrix(values, mask, lam)


def build_masked_costs(
    probs,
    pred_boxes,
    gt_boxes: Sequence[Box3D],
    gt_labels: Sequence[int],
    partition: SuperpointPartition,
    j: int = DEFAULT_J,
    lam: float = DEFAULT_LAMBDA,
) -> CostMatrix:
    """Costs restricted to each gt's ``j`` nearest superpoints (others +inf)."""
    if len(gt_boxes) != len(gt_labels):
        raise ValueError("gt_boxes and gt_labels differ in length")
    mask = candidate_mask(partition, gt_boxes, j)
    return _fill_costs(probs, pred_boxes, gt_boxes, gt_labels, mask, lam)


def build_dense_costs(probs, pred_boxes, gt_boxes, gt_labels, lam: float = DEFAULT_LAMBDA) -> CostMatrix:
    m = np.asarray(probs.data if isinstance(probs, Tensor) else probs).shape[0]
    mask = np.ones((m, len(gt_boxes)), dtype=bool)
    return _fill_costs(probs, pred_boxes, gt_boxes, gt_labels, mask, lam)


# ------------------------------------------------------------------ matchers


def match_disentangled(cm: CostMatrix) -> Matching:
    """Largest matching over finite entries, and among those the cheapest.

    Successive shortest augmenting paths (Bellman-Ford, so negative costs
    are fine) on the sparse bipartite graph gt -> candidate proposal.  Each
    augmentation adds one matched gt at minimum extra cost, which keeps the
    flow cost-optimal for its size; the loop stops when no gt can be added.
    """
    m, k = cm.shape
    rows, cols = np.nonzero(cm.finite)
    if rows.size == 0:
        return Matching(())
    props = np.unique(rows)
    pidx = {int(p): i for i, p in enumerate(props)}
    # nodes: 0 = source, 1..k = gts, k+1..k+P = proposals, k+P+1 = sink
    n_p = len(props)
    sink = k + n_p + 1
    n_nodes = sink + 1
    # residual edges stored as parallel lists; edge e and e ^ 1 are a pair
    to, cap, wt, head = [], [], [], [[] for _ in range(n_nodes)]

    def add(u, v, c):
        head[u].append(len(to)); to.append(v); cap.append(1); wt.append(c)
        head[v].append(len(to)); to.append(u); cap.append(0); wt.append(-c)

    for g in range(k):
        if cm.finite[:, g].any():
            add(0, 1 + g, 0.0)
    order = np.lexsort((rows, cols))  # by gt, then proposal
    for e in order:
        add(1 + int(cols[e]), k + 1 + pidx[int(rows[e])], float(cm.values[rows[e], cols[e]]))
    for i in range(n_p):
        add(k + 1 + i, sink, 0.0)

    while True:
        dist = [np.inf] * n_nodes
        prev = [-1] * n_nodes
        dist[0] = 0.0
        for _ in range(n_nodes - 1):
            changed = False
            for u in range(n_nodes):
                du = dist[u]
                if du == np.inf:
                    continue
                for e in head[u]:
                    if cap[e] > 0 and du + wt[e] < dist[to[e]] - 1e-15:
                        dist[to[e]] = du + wt[e]
                        prev[to[e]] = e
                        changed = True
            if not changed:
                break
        if dist[sink] == np.inf:
            break
        v = sink
        while v != 0:
            e = prev[v]
            cap[e] -= 1
            cap[e ^ 1] += 1
            v = to[e ^ 1]

    pairs = []
    for g in range(k):
        for e in head[1 + g]:
            v = to[e]
            if k + 1 <= v <= k + n_p and e % 2 == 0 and cap[e] == 0:
                pairs.append((int(props[v - k - 1]), g))
    return Matching(tuple(pairs))


def match_hungarian(costs) -> Matching:
    """Minimum-cost assignment of size ``min(M, K)`` on a dense finite matrix.

    O(n^2 m) shortest-augmenting-path method with row/column potentials.
    """
    c = np.asarray(costs.values if isinstance(costs, CostMatrix) else costs, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if isinstance(costs, CostMatrix) and not costs.finite.all():
        raise ValueError("match_hungarian needs a dense matrix; found masked (+inf) entries")
    if not np.all(np.isfinite(c)):
        raise ValueError("match_hungarian needs finite costs")
    if c.size == 0:
        return Matching(())
    transposed = c.shape[0] > c.shape[1]
    a = c.T if transposed else c
    n, m = a.shape  # n <= m
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j] = row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = a[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    pairs = [(int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j] != 0]
    if transposed:
        pairs = [(col, row) for row, col in pairs]
    return Matching(tuple(pairs))


# ------------------------------------------------------------------ loss


@dataclass
class LossTerms:
    total: Tensor
    cls: Tensor
    reg: Tensor
    matched: int
    no_match: bool = field(default=False)


def detection_loss(
    matching: Matching,
    class_logits: Tensor,
    pred_boxes: BoxBatch,
    gt_boxes: Sequence[Box3D],
    gt_labels: Sequence[int],
    beta: float = DEFAULT_BETA,
) -> LossTerms:
    """``beta * L_cls + L_reg``.

    ``class_logits`` is (M, |L| + 1); the last column is no-object, the
    target of every unmatched proposal.  L_cls averages over all M
    proposals and L_reg averages the DIoU distance over matched pairs.  With
    no matched pairs L_reg is exactly 0 and ``no_match`` is set.
    """
    m, width = class_logits.shape
    no_object = width - 1
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    target = np.full(m, no_object, dtype=np.int64)
    if len(matching):
        props, gts = matching.proposals, matching.gts
        if props.max() >= m or gts.max() >= len(gt_boxes):
            raise IndexError("matching refers to proposals or gts that do not exist")
        target[props] = gt_labels[gts]
    if np.any(target > no_object) or np.any(target < 0):
        raise ValueError("gt label outside the class head's range")
    l_cls = T.cross_entropy(class_logits, target)
    if len(matching):
        gt_batch = BoxBatch.from_boxes([gt_boxes[g] for g in gts])
        l_reg = T.mean(diou_distance_t(pred_boxes.take(props), gt_batch))
        no_match = False
    else:
        l_reg = T.tensor(0.0)
        no_match = True
    total = l_cls * beta + l_reg
    return LossTerms(total, l_cls, l_reg, len(matching), no_match)


def loss(matching, class_logits, pred_boxes, gt_boxes, gt_labels, beta: float = DEFAULT_BETA) -> Tensor:
    return detection_loss(matching, class_logits, pred_boxes, gt_boxes, gt_labels, beta).total
