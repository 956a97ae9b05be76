"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.stats import qmc

from mdet3d.geometry import Box3D


def aligned_intersection(a: Box3D, b: Box3D) -> float:
    """Product of per-axis interval overlaps (yaw 0 boxes)."""
    vol = 1.0
    for ca, sa, cb, sb in zip(a.center, a.size, b.center, b.size):
        lo = max(ca - sa / 2, cb - sb / 2)
        hi = min(ca + sa / 2, cb + sb / 2)
        vol *= max(0.0, hi - lo)
    return vol


def aligned_iou(a: Box3D, b: Box3D) -> float:
    if a == b:
        return 1.0  # (c + w/2) - (c - w/2) need not round back to w
    inter = aligned_intersection(a, b)
    # a ratio of equal floats can round one ulp above 1
    return min(1.0, inter / (a.volume + b.volume - inter))


def inside(box: Box3D, pts: np.ndarray) -> np.ndarray:
    d = pts - np.array(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    w, l, h = box.size
    return (np.abs(lx) <= w / 2) & (np.abs(ly) <= l / 2) & (np.abs(d[:, 2]) <= h / 2)


def monte_carlo_iou(a: Box3D, b: Box3D, log2_samples: int = 20, seed: int = 0) -> float:
    """IoU from scrambled-Sobol sampling of box ``a``'s volume.

    Points are drawn uniformly inside ``a`` (in its own frame), so
    ``inter = vol(a) * fraction inside b`` and IoU follows from the volumes.
    """
    u = qmc.Sobol(3, scramble=True, seed=seed).random_base2(log2_samples) - 0.5
    local = u * np.array(a.size)
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    world = np.c_[c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1], local[:, 2]] + np.array(a.center)
    inter = a.volume * inside(b, world).mean()
    return inter / (a.volume + b.volume - inter)


def greedy_nms(dets, thr):
    """Textbook greedy suppression, per class."""
    from mdet3d.geometry import iou

    remaining = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    kept = []
    while remaining:
        i = remaining.pop(0)
        kept.append(i)
        remaining = [k for k in remaining if not (dets[k][2] == dets[i][2] and iou(dets[i][0], dets[k][0]) > thr)]
    return kept


def brute_force_assignment(values: np.ndarray, finite: np.ndarray | None = None):
    """Exhaustive search over injective partial assignments.

    Returns (cardinality, cost) of the best assignment: maximal number of
    matched columns first, then minimal total cost.  For a dense matrix this
    is the min-cost perfect matching of size min(M, K).
    """
    m, k = values.shape
    if finite is None:
        finite = np.ones_like(values, dtype=bool)
    best = (-1, math.inf)
    # each column picks a row or None
    choices = [[None] + [i for i in range(m) if finite[i, c]] for c in range(k)]
    for combo in itertools.product(*choices):
        rows = [r for r in combo if r is not None]
        if len(rows) != len(set(rows)):
            continue
        cost = math.fsum(values[r, c] for c, r in enumerate(combo) if r is not None)
        key = (len(rows), cost)
        if key[0] > best[0] or (key[0] == best[0] and key[1] < best[1]):
            best = key
    return best


def permutation_min_cost(values: np.ndarray) -> float:
    m, k = values.shape
    if m < k:
        values, m, k = values.T, k, m
    best = math.inf
    for rows in itertools.permutations(range(m), k):
        best = min(best, math.fsum(values[r, c] for c, r in enumerate(rows)))
    return best


def brute_force_ap(scores, tp, num_gt) -> float:
    """AP by explicit PR points: for every recall level, max precision at
    that recall or beyond, integrated as a step function."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    points = []
    hits = 0
    for rank, i in enumerate(order, start=1):
        hits += bool(tp[i])
        points.append((hits / num_gt, hits / rank))
    ap = 0.0
    prev_recall = 0.0
    for r in sorted({p[0] for p in points}):
        if r <= prev_recall:
            continue
        best = max(p for rr, p in points if rr >= r)
        ap += (r - prev_recall) * best
        prev_recall = r
    return ap


def brute_force_evaluate(dets_per_scene, gts_per_scene, num_classes, thr):
    """Per-class greedy matching and AP, written independently of the package."""
    from mdet3d.geometry import iou

    aps = {}
    for c in range(num_classes):
        ngt = sum(int(np.sum(np.asarray(l) == c)) for _, l in gts_per_scene)
        if ngt == 0:
            continue
        flat = [(s, b, sc) for s, dets in enumerate(dets_per_scene) for (b, sc, cc) in dets if cc == c]
        flat.sort(key=lambda t: -t[2])  # stable, like the package
        used = {s: set() for s in range(len(gts_per_scene))}
        scores, tp = [], []
        for s, b, sc in flat:
            boxes, labels = gts_per_scene[s]
            cands = [(iou(b, g), k) for k, (g, l) in enumerate(zip(boxes, labels)) if l == c and k not in used[s]]
            hit = False
            if cands:
                v, k = max(cands, key=lambda t: (t[0], -t[1]))
                if v >= thr:
                    used[s].add(k)
                    hit = True
            scores.append(sc)
            tp.append(hit)
        aps[c] = brute_force_ap(scores, tp, ngt) if scores else 0.0
    return aps


def random_eval_instance(rng, n_scenes, n_classes, n_dets):
    """Random detections and gts; boxes sit on a coarse grid so IoU ties and
    near-threshold overlaps occur."""

    def box():
        x, y = rng.integers(0, 3, size=2) * 0.5
        s = rng.choice([0.5, 1.0, 1.5])
        return Box3D((float(x), float(y), 0.5), (float(s), 1.0, 1.0), float(rng.choice([0.0, 0.3])))

    gts = []
    for _ in range(n_scenes):
        k = int(rng.integers(0, 4))
        gts.append(([box() for _ in range(k)], rng.integers(0, n_classes, size=k)))
    dets = [[] for _ in range(n_scenes)]
    for _ in range(n_dets):
        s = int(rng.integers(n_scenes))
        score = float(rng.choice([0.2, 0.5, 0.7, 0.9]) + rng.uniform(0, 0.05))
        dets[s].append((box(), score, int(rng.integers(n_classes))))
    return dets, gts
