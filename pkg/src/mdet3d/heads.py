"""Per-query classification and box regression heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import Box3D, BoxBatch, decode_boxes
from .nn import MLP, Module
from .tensor import Tensor

BOX_CHANNELS = 8


class ClassHead(Module):
    """MLP producing logits over ``num_classes`` classes, plus one trailing
    no-object logit when ``no_object`` is set."""

    def __init__(self, in_dim: int, num_classes: int, rng: np.random.Generator, depth: int = 2, no_object: bool = True):
        super().__init__()
        if num_classes < 1:
            raise ValueError("a class head needs at least one class")
        if depth < 1:
            raise ValueError("head depth must be >= 1")
        self.num_classes = num_classes
        self.no_object = no_object
        self.out_dim = num_classes + int(no_object)
        self.child("mlp", MLP([in_dim] * depth + [self.out_dim], rng))

    def logits(self, features: Tensor) -> Tensor:
        return self.mlp(features)

    def __call__(self, features: Tensor) -> Tensor:
        return T.softmax(self.logits(features), axis=-1)


class BoxHead(Module):
    def __init__(self, in_dim: int, rng: np.random.Generator, depth: int = 2):
        super().__init__()
        if depth < 1:
            raise ValueError("head depth must be >= 1")
        self.child("mlp", MLP([in_dim] * depth + [BOX_CHANNELS], rng))

    def raw(self, features: Tensor) -> Tensor:
        return self.mlp(features)

    def __call__(self, features: Tensor, mass_centers: np.ndarray) -> BoxBatch:
        mass_centers = np.asarray(mass_centers, dtype=np.float64)
        if mass_centers.shape != (features.shape[0], 3):
            raise T.ShapeError("box_head", features.shape, mass_centers.shape)
        return decode_boxes(self.raw(features), mass_centers)


def class_head(features: Tensor, head: ClassHead) -> Tensor:
    return head(features)


def box_head(features: Tensor, mass_centers: np.ndarray, head: BoxHead) -> BoxBatch:
    return head(features, mass_centers)


@dataclass(frozen=True)
class Proposal:
    box: Box3D
    class_scores: np.ndarray  # (|L|,) sums to 1, no-object mass removed
    query_index: int
    no_object: float = 0.0  # probability mass on the no-object class

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_scores))


def make_proposals(probs: np.ndarray, boxes: BoxBatch, num_classes: int) -> list[Proposal]:
    """Package head outputs; ``probs`` may carry a trailing no-object column."""
    probs = np.asarray(probs, dtype=np.float64)
    out = []
    for i, box in enumerate(boxes.to_boxes()):
        p = probs[i, :num_classes]
        rest = float(probs[i, num_classes:].sum())
        total = p.sum()
        scores = p / total if total > 0 else np.full(num_classes, 1.0 / num_classes)
        out.append(Proposal(box, scores, i, rest))
    return out
