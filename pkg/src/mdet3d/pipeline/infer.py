"""Inference: forward pass, thresholding, class-wise NMS, detection files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..geometry import Box3D, nms
from ..scene import Scene, cap_points
from ..superpoint import SuperpointPartition, compute_superpoints
from .data import SceneCache
from .model import Detector, ForwardOutput

DET_SUFFIX = ".det.jsonl"


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    label: int  # index into the label space
    class_name: str
    query_index: int

    def to_record(self) -> dict:
        b = self.box
        return {
            "center": list(b.center),
            "size": list(b.size),
            "yaw": b.yaw,
            "class": self.class_name,
            "label": self.label,
            "score": self.score,
            "query": self.query_index,
        }


def select_detections(
    out: ForwardOutput,
    class_names,
    score_threshold: float = 0.1,
    nms_iou: float = 0.5,
) -> list[Detection]:
    """Argmax over classes plus no-object; keep object predictions scoring at
    least ``score_threshold``; class-wise NMS; sort by score (descending)."""
    probs = out.probs()
    n = out.num_classes
    top = np.argmax(probs, axis=1)
    boxes = out.boxes.to_boxes()
    cands = []
    for i in range(probs.shape[0]):
        c = int(top[i])
        if c == n:
            continue
        score = float(probs[i, c])
        if score < score_threshold:
            continue
        g = int(out.global_index[c])
        cands.append(Detection(boxes[i], score, g, class_names[g], i))
    keep = nms([(d.box, d.score, d.label) for d in cands], nms_iou)
    kept = [cands[k] for k in keep]
    kept.sort(key=lambda d: -d.score)
    return kept


def infer(
    scene: Scene,
    model: Detector,
    score_threshold: float | None = None,
    nms_iou: float | None = None,
    cache: SceneCache | None = None,
    partition: SuperpointPartition | None = None,
) -> list[Detection]:
    cfg = model.cfg
    score_threshold = cfg.score_threshold if score_threshold is None else score_threshold
    nms_iou = cfg.nms_iou if nms_iou is None else nms_iou
    if partition is None:
        if cache is not None:
            prep = cache.get(scene)
            if prep is None:
                return []
            scene, partition = prep.scene, prep.partition()
        else:
            scene = cap_points(scene, cfg.point_limit, cfg.seed)
            partition = compute_superpoints(scene, cfg.superpoints)
    with T.no_grad():
        out = model(scene, partition)
    return select_detections(out, model.label_space.classes, score_threshold, nms_iou)


def dumps_detections(dets: list[Detection]) -> str:
    return "".join(json.dumps(d.to_record(), allow_nan=False) + "\n" for d in dets)


def save_detections(dets: list[Detection], path: str | Path) -> None:
    Path(path).write_text(dumps_detections(dets), encoding="utf-8")


def load_detections(path: str | Path) -> list[Detection]:
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        r = json.loads(line)
        try:
            box = Box3D(tuple(r["center"]), tuple(r["size"]), float(r["yaw"]))
            out.append(Detection(box, float(r["score"]), int(r["label"]), str(r["class"]), int(r.get("query", -1))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{i}: bad detection record: {exc}") from None
    return out


def evaluate_model(model: Detector, scenes, cache: SceneCache | None = None, thresholds=(0.25, 0.5)):
    """Run :func:`infer` on every scene and score against its gt boxes."""
    from .data import gt_labels
    from .evaluate import evaluate

    cfg = model.cfg
    cache = cache or SceneCache(cfg.point_limit, cfg.superpoints, cfg.seed)
    dets, gts, ids = [], [], []
    for sc in scenes:
        dets.append(infer(sc, model, cache=cache))
        gts.append((sc.boxes, gt_labels(sc, model.label_space)))
        ids.append(sc.dataset_id)
    return evaluate(dets, gts, model.label_space.classes, thresholds, ids)
