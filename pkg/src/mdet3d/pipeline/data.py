"""Datasets, the sampling mixture, and per-scene preprocessing cache."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..labelspace import LabelSpace, Vocabulary, build, builtin_vocabulary, BUILTIN_DATASETS, project_gt
from ..scene import Scene, cap_points, generate_synthetic, load_scene_dir
from ..superpoint import SuperpointParams, SuperpointPartition, compute_superpoints
from .config import DatasetConfig, TrainConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetSplit:
    id: str
    train: tuple[Scene, ...]
    val: tuple[Scene, ...]
    vocabulary: Vocabulary
    weight: float | None = None

    def __post_init__(self):
        for s in self.train + self.val:
            if s.dataset_id != self.id:
                raise ValueError(f"scene with dataset_id {s.dataset_id!r} listed under dataset {self.id!r}")


class DatasetMixture:
    """Named dataset splits with per-dataset sampling weights.

    ``proportional`` weighting draws each scene uniformly from the union of
    training splits; ``uniform`` gives every dataset equal probability.
    Explicit per-dataset weights override both.
    """

    def __init__(self, splits, weighting: str = "proportional"):
        self.splits = tuple(splits)
        if not self.splits:
            raise ValueError("a mixture needs at least one dataset")
        ids = [s.id for s in self.splits]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate dataset ids {ids}")
        raw = []
        for s in self.splits:
            if s.weight is not None:
                raw.append(float(s.weight))
            elif weighting == "uniform":
                raw.append(1.0 if s.train else 0.0)
            else:
                raw.append(float(len(s.train)))
        raw = np.array(raw)
        if np.any(raw < 0) or raw.sum() <= 0:
            raise ValueError("mixture weights must be positive with at least one training scene")
        for s, w in zip(self.splits, raw):
            if w > 0 and not s.train:
                raise ValueError(f"dataset {s.id!r} has a positive weight but no training scenes")
        self.weights = raw / raw.sum()

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.splits)

    def split(self, dataset_id: str) -> DatasetSplit:
        for s in self.splits:
            if s.id == dataset_id:
                return s
        raise KeyError(dataset_id)

    @property
    def num_train(self) -> int:
        return sum(len(s.train) for s in self.splits)

    def train_scenes(self) -> list[Scene]:
        return [sc for s in self.splits for sc in s.train]

    def val_scenes(self) -> list[Scene]:
        return [sc for s in self.splits for sc in s.val]

    def vocabularies(self) -> list[Vocabulary]:
        return [s.vocabulary for s in self.splits]

    def sample(self, rng: np.random.Generator, n: int) -> list[Scene]:
        """``n`` i.i.d. draws: dataset by weight, then a uniform scene."""
        out = []
        for _ in range(n):
            d = int(rng.choice(len(self.splits), p=self.weights))
            pool = self.splits[d].train
            out.append(pool[int(rng.integers(len(pool)))])
        return out


def _infer_classes(scenes) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for s in scenes:
        for c in s.classes:
            seen.setdefault(c, None)
    return tuple(seen)


def resolve_vocabulary(d: DatasetConfig, scenes) -> Vocabulary:
    if d.classes:
        return Vocabulary(d.id, tuple(d.classes))
    if d.vocabulary:
        if d.vocabulary.endswith(".json"):
            v = Vocabulary.load(d.vocabulary)
            return Vocabulary(d.id, v.classes)
        return Vocabulary(d.id, builtin_vocabulary(d.vocabulary).classes)
    if d.synthetic is not None:
        return Vocabulary(d.id, tuple(d.synthetic.classes))
    if d.id in BUILTIN_DATASETS:
        return Vocabulary(d.id, builtin_vocabulary(d.id).classes)
    classes = _infer_classes(scenes)
    if not classes:
        raise ValueError(f"dataset {d.id!r}: no vocabulary given and no gt classes to infer one from")
    return Vocabulary(d.id, classes)


def synthetic_scenes(d: DatasetConfig) -> tuple[list[Scene], list[Scene]]:
    spec = dataclasses.replace(d.synthetic, dataset_id=d.id)
    base = d.seed * 1_000_003
    train = [generate_synthetic(base + i, spec) for i in range(d.train_scenes)]
    val = [generate_synthetic(base + d.train_scenes + i, spec) for i in range(d.val_scenes)]
    return train, val


def _dir_scenes(path: str | None, ds_id: str) -> list[Scene]:
    if not path:
        return []
    if not Path(path).is_dir():
        raise FileNotFoundError(f"dataset {ds_id!r}: scene directory {path} does not exist")
    return load_scene_dir(path)


def load_split(d: DatasetConfig) -> DatasetSplit:
    if d.synthetic is not None:
        train, val = synthetic_scenes(d)
    else:
        train, val = _dir_scenes(d.train, d.id), _dir_scenes(d.val, d.id)
    vocab = resolve_vocabulary(d, train + val)
    return DatasetSplit(d.id, tuple(train), tuple(val), vocab, d.weight)


def load_mixture(cfg: TrainConfig) -> DatasetMixture:
    if not cfg.datasets:
        raise ValueError("config lists no datasets")
    return DatasetMixture([load_split(d) for d in cfg.datasets], cfg.mixture_weighting)


def build_label_space(mode: str, vocabularies) -> LabelSpace:
    """``separate`` uses the single dataset's own space."""
    if mode == "separate":
        if len(vocabularies) != 1:
            raise ValueError("label_mode 'separate' needs exactly one dataset")
        return build(vocabularies, "unified")
    return build(vocabularies, mode)


# ------------------------------------------------------------------ preprocessing


@dataclass(frozen=True)
class PreparedScene:
    scene: Scene  # after the point cap
    assignment: np.ndarray  # superpoint id per point of ``scene``

    def partition(self, scene: Scene | None = None) -> SuperpointPartition:
        """Partition with mass centres taken from ``scene`` (e.g. an augmented copy)."""
        s = self.scene if scene is None else scene
        return SuperpointPartition.from_assignment(self.assignment, s.xyz)


class SceneCache:
    """Point cap and superpoints, computed once per scene content hash."""

    def __init__(self, point_limit: int, params: SuperpointParams, seed: int = 0):
        self.point_limit = point_limit
        self.params = params
        self.seed = seed
        self._store: dict[str, PreparedScene | None] = {}

    def get(self, scene: Scene) -> PreparedScene | None:
        key = scene.content_hash()
        if key not in self._store:
            capped = cap_points(scene, self.point_limit, self.seed)
            try:
                part = compute_superpoints(capped, self.params)
            except Exception as exc:  # noqa: BLE001 - any failure skips the scene
                log.warning("skipping scene %s: superpoint computation failed: %s", key[:12], exc)
                self._store[key] = None
            else:
                self._store[key] = PreparedScene(capped, part.assignment)
        return self._store[key]

    def __len__(self) -> int:
        return len(self._store)


def gt_labels(scene: Scene, ls: LabelSpace) -> np.ndarray:
    return project_gt(scene, ls)
