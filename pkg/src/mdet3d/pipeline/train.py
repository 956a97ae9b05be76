"""Training loop and checkpoint I/O for the detector."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .. import tensor as T
from ..assignment import (
    Matching,
    build_dense_costs,
    build_masked_costs,
    detection_loss,
    match_disentangled,
    match_hungarian,
)
from ..labelspace import LabelSpace, SynonymTable, Vocabulary, build
from ..nn import dumps_checkpoint, load_checkpoint
from ..scene import Scene, augment
from .config import TrainConfig, config_from_dict
from .data import DatasetMixture, PreparedScene, SceneCache, build_label_space, gt_labels
from .model import Detector
from .optim import AdamWState, adamw_step, lr_at

log = logging.getLogger(__name__)

OPT_PREFIX = "adamw."


@dataclass
class StepRecord:
    step: int
    epoch: float
    lr: float
    loss: float
    cls: float
    reg: float
    matched: int
    scenes: int


@dataclass
class TrainResult:
    model: Detector
    label_space: LabelSpace
    history: list[StepRecord]
    optimizer: AdamWState
    cache: SceneCache
    skipped: int = 0
    seconds: float = 0.0

    def epoch_losses(self) -> list[float]:
        """Mean step loss per (integer) epoch."""
        by: dict[int, list[float]] = {}
        for r in self.history:
            by.setdefault(int(math.floor(r.epoch)), []).append(r.loss)
        return [float(np.mean(by[k])) for k in sorted(by)]

    def checkpoint_text(self) -> str:
        step = self.history[-1].step + 1 if self.history else 0
        return checkpoint_text(self.model, self.optimizer, step)


def augment_seed(seed: int, step: int, slot: int) -> int:
    return int(np.random.SeedSequence([seed, step, slot]).generate_state(1)[0])


def scene_loss(model: Detector, prep: PreparedScene, scene: Scene, cfg: TrainConfig):
    """Forward one (possibly augmented) scene and return its loss terms."""
    part = prep.partition(scene)
    out = model(scene, part)
    ls = model.label_space
    labels = gt_labels(scene, ls)
    # column of each gt in this scene's class head
    col_of = {int(g): i for i, g in enumerate(out.global_index)}
    local = np.array([col_of[int(g)] for g in labels], dtype=np.int64)
    boxes = scene.boxes
    probs = out.probs()
    if boxes:
        if cfg.matching == "hungarian":
            matching = match_hungarian(build_dense_costs(probs, out.boxes, boxes, local, cfg.lam))
        else:
            matching = match_disentangled(build_masked_costs(probs, out.boxes, boxes, local, part, cfg.j, cfg.lam))
    else:
        matching = Matching(())
    return detection_loss(matching, out.logits, out.boxes, boxes, local, cfg.beta)


def named_params(model: Detector) -> dict[str, T.Tensor]:
    return dict(model.named_parameters())


def checkpoint_meta(model: Detector, step: int) -> dict:
    ls = model.label_space
    return {
        "config": model.cfg.to_dict(),
        "label_space": {
            "mode": ls.mode,
            "vocabularies": [{"dataset_id": v.dataset_id, "classes": list(v.classes)} for v in ls.vocabularies],
            "synonyms": [list(p) for p in ls.synonyms.items()],
        },
        "step": int(step),
    }


def checkpoint_text(model: Detector, opt: AdamWState | None, step: int) -> str:
    state = model.state_dict()
    if opt is not None:
        state.update(opt.to_arrays())
    return dumps_checkpoint(state, checkpoint_meta(model, step))


def save_training_checkpoint(path: str | Path, model: Detector, opt: AdamWState | None, step: int) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(checkpoint_text(model, opt, step), encoding="utf-8")


def label_space_from_meta(meta: dict) -> LabelSpace:
    info = meta["label_space"]
    vocabs = [Vocabulary(v["dataset_id"], tuple(v["classes"])) for v in info["vocabularies"]]
    syn = SynonymTable(tuple(p) for p in info.get("synonyms", []))
    if info["mode"] == "partitioned":
        return build(vocabs, "partitioned", syn)
    return build(vocabs, "unified", syn)


def load_model(path: str | Path) -> tuple[Detector, dict, AdamWState | None]:
    """Rebuild a detector (and optimizer state, if stored) from a checkpoint."""
    state, meta = load_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    ls = label_space_from_meta(meta)
    model = Detector(cfg, ls, np.random.default_rng(cfg.seed))
    model_state = {k: v for k, v in state.items() if not k.startswith(OPT_PREFIX)}
    model.load_state_dict(model_state, strict=True)
    opt_state = {k: v for k, v in state.items() if k.startswith(OPT_PREFIX)}
    opt = AdamWState.from_arrays(opt_state) if opt_state else None
    return model, meta, opt


def train(
    mixture: DatasetMixture,
    cfg: TrainConfig,
    resume: str | Path | None = None,
    on_step: Callable[[StepRecord], None] | None = None,
    cache: SceneCache | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Optimise a fresh (or initialised / resumed) detector on ``mixture``.

    ``max_steps`` stops early at that global step without changing the
    schedule, so a run split at any step and resumed equals an uninterrupted one.
    """
    t0 = time.perf_counter()
    ls = build_label_space(cfg.label_mode, mixture.vocabularies())
    model = Detector(cfg, ls, np.random.default_rng(cfg.seed))
    opt = AdamWState()
    start = 0
    if resume is not None:
        loaded, meta, loaded_opt = load_model(resume)
        model.load_state_dict(loaded.state_dict(), strict=True)
        opt = loaded_opt or AdamWState()
        start = int(meta.get("step", 0))
    elif cfg.scheme == "fine_tune":
        if not cfg.init_checkpoint or not Path(cfg.init_checkpoint).exists():
            raise FileNotFoundError(f"fine_tune needs an existing init_checkpoint, got {cfg.init_checkpoint!r}")
        state, _ = load_checkpoint(cfg.init_checkpoint)
        state = {k: v for k, v in state.items() if not k.startswith(OPT_PREFIX)}
        skipped = model.load_state_dict(state, strict=False)
        if skipped:
            log.info("fine_tune: %d parameters re-initialised (shape or name mismatch): %s", len(skipped), skipped)

    cache = cache or SceneCache(cfg.point_limit, cfg.superpoints, cfg.seed)
    params = named_params(model)
    steps_per_epoch = max(1, math.ceil(mixture.num_train / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    sampler = np.random.default_rng([cfg.seed, 1])
    # replay the sampler so a resumed run draws the same batches
    for _ in range(start):
        mixture.sample(sampler, cfg.batch_size)

    history: list[StepRecord] = []
    skipped_scenes = 0
    end = total_steps if max_steps is None else min(total_steps, max_steps)
    for step in range(start, end):
        epoch = step / steps_per_epoch
        lr = lr_at(epoch, cfg)
        batch = mixture.sample(sampler, cfg.batch_size)
        with T.Tape():
            terms = []
            for slot, raw in enumerate(batch):
                prep = cache.get(raw)
                if prep is None:
                    skipped_scenes += 1
                    continue
                scene = augment(prep.scene, augment_seed(cfg.seed, step, slot), cfg.augment)
                terms.append(scene_loss(model, prep, scene, cfg))
            if not terms:
                continue
            total = terms[0].total
            for t in terms[1:]:
                total = total + t.total
            total = total * (1.0 / len(terms))
            grads = T.backward(total)
        by_name = {name: grads[p] for name, p in params.items() if p in grads}
        adamw_step(params, by_name, opt, lr, cfg.weight_decay)
        rec = StepRecord(
            step,
            epoch,
            lr,
            float(total.item()),
            float(np.mean([t.cls.item() for t in terms])),
            float(np.mean([t.reg.item() for t in terms])),
            int(sum(t.matched for t in terms)),
            len(terms),
        )
        history.append(rec)
        if on_step is not None:
            on_step(rec)
    for p in params.values():
        p.grad = None
    return TrainResult(model, ls, history, opt, cache, skipped_scenes, time.perf_counter() - t0)


def write_log(history: list[StepRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in history:
            fh.write(json.dumps(r.__dict__) + "\n")
