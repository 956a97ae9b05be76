"""The detector: backbone -> superpoint pooling -> encoder -> heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..backbone import PointwiseMLP, SparseUNet
from ..encoder import Encoder, QuerySet
from ..geometry import BoxBatch
from ..heads import BoxHead, ClassHead
from ..labelspace import LabelSpace
from ..nn import Linear, Module
from ..scene import Scene, VoxelGrid, voxelize
from ..superpoint import SuperpointPartition, pool_features
from ..tensor import Tensor
from .config import TrainConfig


@dataclass
class ForwardOutput:
    logits: Tensor  # (M, n + 1); last column is no-object
    boxes: BoxBatch
    partition: SuperpointPartition
    global_index: np.ndarray  # (n,) head column -> label-space class index

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1] - 1

    def probs(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def _centered(points: np.ndarray) -> np.ndarray:
    """Features with xyz relative to the scene centroid, so the network sees
    shape and colour rather than absolute placement."""
    out = np.array(points, dtype=np.float64)
    out[:, :3] -= out[:, :3].mean(axis=0)
    return out


class Detector(Module):
    def __init__(self, cfg: TrainConfig, ls: LabelSpace, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.label_space = ls
        bb = cfg.backbone
        if bb.kind == "sparse_unet":
            self.child("backbone", SparseUNet(6, bb.stem, tuple(bb.channels), rng))
        else:
            self.child("backbone", PointwiseMLP(6, bb.hidden, bb.hidden, rng))
        c = cfg.encoder.model_dim
        self.child("proj", Linear(self.backbone.out_dim, c, rng))
        self.child("encoder", Encoder(cfg.encoder, rng))
        self.partitioned = ls.mode == "partitioned"
        if self.partitioned:
            self.class_heads = {}
            for ds in ls.datasets:
                n = len(ls.maps[ds])
                self.class_heads[ds] = self.child(f"cls_{ds}", ClassHead(c, n, rng, cfg.head_depth))
        else:
            self.child("cls", ClassHead(c, len(ls), rng, cfg.head_depth))
        self.child("box", BoxHead(c, rng, cfg.head_depth))

    def head_for(self, dataset_id: str) -> tuple[ClassHead, np.ndarray]:
        if self.partitioned:
            if dataset_id not in self.class_heads:
                raise KeyError(f"no class head for dataset {dataset_id!r}")
            return self.class_heads[dataset_id], np.asarray(self.label_space.maps[dataset_id])
        return self.cls, np.arange(len(self.label_space))

    def head_size(self) -> int:
        """Total number of object classes over all class heads."""
        if self.partitioned:
            return sum(h.num_classes for h in self.class_heads.values())
        return self.cls.num_classes

    def point_features(self, scene: Scene) -> Tensor:
        feats = _centered(scene.points)
        if self.cfg.backbone.kind == "sparse_unet":
            # voxel coordinates come from the original placement; only the
            # per-voxel features use the centred copy
            grid = _with_features(voxelize(scene, self.cfg.backbone.voxel_size), feats)
            return self.backbone(grid)
        return self.backbone(feats)

    def forward(self, scene: Scene, partition: SuperpointPartition) -> ForwardOutput:
        if partition.num_points != scene.num_points:
            raise ValueError("partition does not match the scene's points")
        pf = self.point_features(scene)
        sp = self.proj(pool_features(pf, partition))
        q = self.encoder(QuerySet(sp, partition.mass_centers))
        head, gidx = self.head_for(scene.dataset_id)
        logits = head.logits(q)
        boxes = self.box(q, partition.mass_centers)
        return ForwardOutput(logits, boxes, partition, gidx)

    __call__ = forward


def _with_features(grid, feats: np.ndarray):
    """Same voxels as ``grid`` with mean features recomputed from ``feats``."""
    sums = np.zeros((grid.num_voxels, feats.shape[1]))
    np.add.at(sums, grid.point_voxel, feats)
    return VoxelGrid(grid.voxel_size, grid.coords, sums / grid.counts[:, None], grid.counts, grid.point_voxel)
