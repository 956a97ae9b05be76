"""Average precision over IoU thresholds, per class and per dataset."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..geometry import Box3D, iou

DEFAULT_THRESHOLDS = (0.25, 0.5)


def average_precision(scores: Sequence[float], tp: Sequence[bool], num_gt: int) -> float:
    """All-points interpolated AP: area under the precision envelope.

    ``scores``/``tp`` describe every detection of one class; detections are
    ranked by descending score with ties kept in the given order.
    """
    if num_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hits = np.asarray(tp, dtype=bool)[order]
    ctp = np.cumsum(hits)
    cfp = np.cumsum(~hits)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _as_triples(dets) -> list[tuple[Box3D, float, int]]:
    out = []
    for d in dets:
        if hasattr(d, "box"):
            out.append((d.box, float(d.score), int(d.label)))
        else:
            b, s, c = d
            out.append((b, float(s), int(c)))
    return out


def match_class(
    dets_per_scene: list[list[tuple[Box3D, float, int]]],
    gts_per_scene: list[tuple[list[Box3D], np.ndarray]],
    cls: int,
    threshold: float,
) -> tuple[list[float], list[bool], int]:
    """Greedy matching for one class: walk detections by descending score and
    claim the unmatched gt of the same scene with the highest IoU, if that IoU
    reaches ``threshold``."""
    entries = []  # (score, scene, box)
    for s, dets in enumerate(dets_per_scene):
        for b, score, c in dets:
            if c == cls:
                entries.append((score, s, b))
    order = sorted(range(len(entries)), key=lambda i: -entries[i][0])
    gt_boxes = [[b for b, c in zip(boxes, labels) if c == cls] for boxes, labels in gts_per_scene]
    taken = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
    num_gt = sum(len(g) for g in gt_boxes)
    scores, tp = [], []
    for i in order:
        score, s, box = entries[i]
        best, best_iou = -1, -1.0
        for k, g in enumerate(gt_boxes[s]):
            if taken[s][k]:
                continue
            v = iou(box, g)
            if v > best_iou:
                best, best_iou = k, v
        hit = best >= 0 and best_iou >= threshold
        if hit:
            taken[s][best] = True
        scores.append(score)
        tp.append(hit)
    return scores, tp, num_gt


@dataclass
class EvalReport:
    class_names: tuple[str, ...]
    thresholds: tuple[float, ...]
    ap: dict[float, dict[str, float]]  # threshold -> class name -> AP (classes with gt only)
    num_gt: dict[str, int]
    mean_ap: dict[float, float]
    per_dataset: dict[str, "EvalReport"] = field(default_factory=dict)
    seconds: float = 0.0
    num_scenes: int = 0

    @property
    def map25(self) -> float:
        return self.mean_ap.get(0.25, float("nan"))

    @property
    def map50(self) -> float:
        return self.mean_ap.get(0.5, float("nan"))

    def to_dict(self) -> dict:
        return {
            "mAP": {f"{t:g}": v for t, v in self.mean_ap.items()},
            "per_class": {
                name: {"num_gt": self.num_gt[name], **{f"ap{t:g}": self.ap[t][name] for t in self.thresholds}}
                for name in self.num_gt
            },
            "per_dataset": {k: r.to_dict() for k, r in self.per_dataset.items()},
            "scenes": self.num_scenes,
            "seconds": self.seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "class", "num_gt"] + [f"ap{t:g}" for t in self.thresholds])
        w.writerow(["all", "mAP", sum(self.num_gt.values())] + [f"{self.mean_ap[t]:.6f}" for t in self.thresholds])
        for name, n in self.num_gt.items():
            w.writerow(["all", name, n] + [f"{self.ap[t][name]:.6f}" for t in self.thresholds])
        for ds, rep in self.per_dataset.items():
            w.writerow([ds, "mAP", sum(rep.num_gt.values())] + [f"{rep.mean_ap[t]:.6f}" for t in self.thresholds])
        return buf.getvalue()


def evaluate(
    dets_per_scene,
    gts_per_scene,
    class_names: Sequence[str],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    dataset_ids: Sequence[str] | None = None,
) -> EvalReport:
    """AP per class with at least one gt; mAP is their mean (0 when no class has gt).

    ``dets_per_scene[s]`` holds detections (objects with box/score/label, or
    (box, score, label) triples); ``gts_per_scene[s]`` is (boxes, labels).
    With ``dataset_ids`` a per-dataset breakdown is attached.
    """
    t0 = time.perf_counter()
    thresholds = tuple(float(t) for t in thresholds)
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ValueError(f"IoU threshold must lie in (0, 1), got {t}")
    if len(dets_per_scene) != len(gts_per_scene):
        raise ValueError("detections and ground truth cover different numbers of scenes")
    dets = [_as_triples(d) for d in dets_per_scene]
    gts = [(list(b), np.asarray(l, dtype=np.int64).reshape(-1)) for b, l in gts_per_scene]
    counts = np.zeros(len(class_names), dtype=np.int64)
    for _, labels in gts:
        if labels.size and (labels.min() < 0 or labels.max() >= len(class_names)):
            raise ValueError("gt label outside the label space")
        np.add.at(counts, labels, 1)
    present = [c for c in range(len(class_names)) if counts[c] > 0]
    ap: dict[float, dict[str, float]] = {}
    mean_ap: dict[float, float] = {}
    for t in thresholds:
        per = {}
        for c in present:
            scores, tp, n = match_class(dets, gts, c, t)
            per[class_names[c]] = average_precision(scores, tp, n)
        ap[t] = per
        mean_ap[t] = float(np.mean(list(per.values()))) if per else 0.0
    report = EvalReport(
        tuple(class_names), thresholds, ap, {class_names[c]: int(counts[c]) for c in present}, mean_ap,
        num_scenes=len(gts),
    )
    if dataset_ids is not None:
        if len(dataset_ids) != len(gts):
            raise ValueError("dataset_ids must name one dataset per scene")
        for ds in dict.fromkeys(dataset_ids):
            idx = [i for i, d in enumerate(dataset_ids) if d == ds]
            report.per_dataset[ds] = evaluate([dets[i] for i in idx], [gts[i] for i in idx], class_names, thresholds)
    report.seconds = time.perf_counter() - t0
    return report
