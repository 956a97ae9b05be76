"""Superpoints: over-segmentation of a point cloud into small coherent
clusters, plus the average pooling that turns point features into
superpoint features."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .geometry import Box3D
from .scene import Scene
from .tensor import Tensor


@dataclass(frozen=True)
class SuperpointParams:
    k: int = 16
    color_weight: float = 0.5
    min_size: int = 20
    # Felzenszwalb's scale constant: a component of size n accepts an edge
    # up to its internal difference plus threshold / n
    threshold: float = 0.5
    max_edge_length: float = 0.3

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.min_size < 1:
            raise ValueError(f"min_size must be >= 1, got {self.min_size}")


@dataclass(frozen=True)
class SuperpointPartition:
    assignment: np.ndarray  # (N,) in [0, M)
    mass_centers: np.ndarray  # (M, 3)
    member_counts: np.ndarray  # (M,)

    @property
    def num_superpoints(self) -> int:
        return self.mass_centers.shape[0]

    @property
    def num_points(self) -> int:
        return self.assignment.shape[0]

    @classmethod
    def from_assignment(cls, assignment, xyz: np.ndarray) -> "SuperpointPartition":
        """Build from any labelling; labels are made canonical (numbered by
        first occurrence)."""
        assignment = canonical_labels(np.asarray(assignment, dtype=np.int64))
        m = int(assignment.max()) + 1
        counts = np.bincount(assignment, minlength=m)
        sums = np.zeros((m, 3))
        np.add.at(sums, assignment, np.asarray(xyz, dtype=np.float64)[:, :3])
        return cls(assignment, sums / counts[:, None], counts)


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel so that segment ids appear in order of their lowest point index."""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse.reshape(-1)]


def knn_edges(xyz: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Undirected k-NN edge list ``(i, j)`` with ``i < j``, sorted and unique."""
    n = xyz.shape[0]
    kk = min(k, n - 1)
    if kk < 1:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    _, nbr = cKDTree(xyz).query(xyz, k=kk + 1)
    src = np.repeat(np.arange(n), kk + 1)
    dst = nbr.reshape(-1)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    key = np.unique(lo * n + hi)
    return key // n, key % n


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int, w: float) -> None:
        # attach the higher root index under the lower for determinism
        if b < a:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = max(self.internal[a], self.internal[b], w)


def compute_superpoints(scene: Scene | np.ndarray, params: SuperpointParams = SuperpointParams()) -> SuperpointPartition:
    """Greedy graph segmentation over a k-NN graph.

    Edge weight is spatial distance plus ``color_weight`` times RGB distance;
    edges longer than ``max_edge_length`` are dropped.  Edges are processed in
    ascending (weight, i, j) order, merging two components when the edge is
    no heavier than either side's internal difference plus
    ``threshold / size``.  A second pass over the same order absorbs
    components smaller than ``min_size``.
    """
    pts = scene.points if isinstance(scene, Scene) else np.asarray(scene, dtype=np.float64)
    n = pts.shape[0]
    if n == 1:
        return SuperpointPartition.from_assignment(np.zeros(1, np.int64), pts[:, :3])
    xyz, rgb = pts[:, :3], pts[:, 3:6]
    src, dst = knn_edges(xyz, params.k)
    spatial = np.linalg.norm(xyz[src] - xyz[dst], axis=1)
    keep = spatial <= params.max_edge_length
    src, dst, spatial = src[keep], dst[keep], spatial[keep]
    weight = spatial + params.color_weight * np.linalg.norm(rgb[src] - rgb[dst], axis=1)
    order = np.lexsort((dst, src, weight))
    src, dst, weight = src[order].tolist(), dst[order].tolist(), weight[order].tolist()

    ds = _DisjointSet(n)
    thr = params.threshold
    for i, j, w in zip(src, dst, weight):
        a, b = ds.find(i), ds.find(j)
        if a == b:
            continue
        if w <= min(ds.internal[a] + thr / ds.size[a], ds.internal[b] + thr / ds.size[b]):
            ds.union(a, b, w)
    min_size = params.min_size
    if min_size > 1:
        for i, j, w in zip(src, dst, weight):
            a, b = ds.find(i), ds.find(j)
            if a != b and (ds.size[a] < min_size or ds.size[b] < min_size):
                ds.union(a, b, w)
    labels = np.array([ds.find(i) for i in range(n)], dtype=np.int64)
    return SuperpointPartition.from_assignment(labels, xyz)


def pool_features(point_features: Tensor, partition: SuperpointPartition) -> Tensor:
    """Average point features over each superpoint: (N, C) -> (M, C)."""
    if point_features.shape[0] != partition.num_points:
        raise ValueError(
            f"pool_features: {point_features.shape[0]} feature rows for {partition.num_points} points"
        )
    return T.segment_mean(point_features, partition.assignment, partition.num_superpoints)


def broadcast_to_points(superpoint_features: Tensor, partition: SuperpointPartition) -> Tensor:
    return T.take(superpoint_features, partition.assignment)


def nearest_superpoints(partition: SuperpointPartition, box: Box3D, j: int = 3) -> np.ndarray:
    """Indices of the ``j`` superpoints with mass centers closest to the box
    center, ascending by distance with ties to the lower index."""
    if j < 1:
        raise ValueError(f"j must be >= 1, got {j}")
    d2 = np.sum((partition.mass_centers - np.asarray(box.center)) ** 2, axis=1)
    return np.argsort(d2, kind="stable")[:j]


def save_partition(partition: SuperpointPartition, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"assignment": partition.assignment.tolist()}) + "\n", encoding="utf-8")


def load_partition(path: str | Path, scene: Scene) -> SuperpointPartition:
    """Read a ``.spt.jsonl`` assignment matching ``scene``'s point order."""
    rec = json.loads(Path(path).read_text(encoding="utf-8").strip().splitlines()[0])
    assignment = np.asarray(rec["assignment"], dtype=np.int64)
    if assignment.shape != (scene.num_points,):
        raise ValueError(f"{path}: {assignment.size} labels for a scene of {scene.num_points} points")
    if assignment.min() < 0:
        raise ValueError(f"{path}: negative superpoint index")
    return SuperpointPartition.from_assignment(assignment, scene.xyz)
