"""Controlled sweeps over one design choice at a time.

Every arm trains from the same base config with a single override and is
evaluated on held-out scenes when the relevant datasets have any, otherwise
on the training scenes (overfit protocol).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .config import TrainConfig
from .data import DatasetMixture, SceneCache, load_mixture
from .evaluate import EvalReport
from .infer import evaluate_model
from .train import TrainResult, save_training_checkpoint, train

SUITES = {
    "layers": (0, 1, 2, 3, 6),
    "matching": ("disentangled", "hungarian"),
    "pe": (False, True),
    "label_mode": ("partitioned", "unified"),
    "scheme": ("from_scratch", "fine_tune", "joint"),
}


@dataclass
class ArmResult:
    name: str
    overrides: dict[str, Any]
    report: EvalReport
    head_size: int
    final_loss: float
    train_seconds: float
    epoch_losses: list[float] = field(default_factory=list)

    def row(self) -> dict:
        return {
            "arm": self.name,
            "mAP25": round(self.report.map25, 6),
            "mAP50": round(self.report.map50, 6),
            "head_size": self.head_size,
            "final_loss": round(self.final_loss, 6),
            "train_seconds": round(self.train_seconds, 2),
        }


@dataclass
class AblationReport:
    suite: str
    arms: list[ArmResult]

    def arm(self, name: str) -> ArmResult:
        for a in self.arms:
            if a.name == name:
                return a
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "arms": [dict(a.row(), overrides=a.overrides, report=a.report.to_dict()) for a in self.arms],
        }

    def table_csv(self) -> str:
        buf = io.StringIO()
        rows = [a.row() for a in self.arms]
        w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["arm"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "epoch", "loss"])
        for a in self.arms:
            for e, v in enumerate(a.epoch_losses):
                w.writerow([a.name, e, f"{v:.6f}"])
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "json": out / f"ablate_{self.suite}.json",
            "csv": out / f"ablate_{self.suite}.csv",
            "curves": out / f"ablate_{self.suite}_curves.csv",
        }
        paths["json"].write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
        paths["csv"].write_text(self.table_csv(), encoding="utf-8")
        paths["curves"].write_text(self.curves_csv(), encoding="utf-8")
        return paths


def _eval_scenes(mixture: DatasetMixture, ids: Sequence[str] | None = None):
    splits = [mixture.split(i) for i in ids] if ids else list(mixture.splits)
    val = [sc for s in splits for sc in s.val]
    return val if val else [sc for s in splits for sc in s.train]


def _restrict(mixture: DatasetMixture, ids: Sequence[str]) -> DatasetMixture:
    return DatasetMixture([mixture.split(i) for i in ids])


def run_arm(
    name: str,
    cfg: TrainConfig,
    mixture: DatasetMixture,
    eval_ids: Sequence[str] | None = None,
    cache: SceneCache | None = None,
    overrides: dict | None = None,
) -> tuple[ArmResult, TrainResult]:
    result = train(mixture, cfg, cache=cache)
    report = evaluate_model(result.model, _eval_scenes(mixture, eval_ids), result.cache)
    losses = result.epoch_losses()
    arm = ArmResult(
        name,
        overrides or {},
        report,
        result.model.head_size(),
        losses[-1] if losses else float("nan"),
        result.seconds,
        losses,
    )
    return arm, result


def ablate(
    suite: str,
    cfg: TrainConfig,
    values: Sequence | None = None,
    mixture: DatasetMixture | None = None,
    out_dir: str | Path | None = None,
) -> AblationReport:
    """Train and evaluate one arm per value of ``suite``.

    For ``scheme`` the last configured dataset is the target and the others
    are sources: ``from_scratch`` trains on the target alone, ``fine_tune``
    pre-trains on the sources then trains on the target, ``joint`` trains on
    everything.  All scheme arms are evaluated on the target only.
    """
    if suite not in SUITES:
        raise ValueError(f"unknown ablation suite {suite!r}; choose from {sorted(SUITES)}")
    values = tuple(SUITES[suite] if values is None else values)
    mixture = mixture or load_mixture(cfg)
    cache = SceneCache(cfg.point_limit, cfg.superpoints, cfg.seed)
    arms: list[ArmResult] = []
    base = cfg.replace(scheme="joint" if len(mixture.splits) > 1 else "from_scratch", init_checkpoint=None)
    for v in values:
        if suite == "layers":
            arm_cfg = base.replace(encoder=dataclasses.replace(base.encoder, layers=int(v)))
            arm, _ = run_arm(f"layers={v}", arm_cfg, mixture, cache=cache, overrides={"encoder.layers": v})
        elif suite == "matching":
            arm, _ = run_arm(f"matching={v}", base.replace(matching=v), mixture, cache=cache, overrides={"matching": v})
        elif suite == "pe":
            enc = dataclasses.replace(base.encoder, use_positional_encoding=bool(v))
            arm, _ = run_arm(f"pe={'on' if v else 'off'}", base.replace(encoder=enc), mixture, cache=cache,
                             overrides={"encoder.use_positional_encoding": bool(v)})
        elif suite == "label_mode":
            arm, _ = run_arm(f"label_mode={v}", base.replace(label_mode=v), mixture, cache=cache,
                             overrides={"label_mode": v})
        else:
            arm = _scheme_arm(str(v), base, mixture, cache, out_dir)
        arms.append(arm)
    report = AblationReport(suite, arms)
    if out_dir is not None:
        report.write(out_dir)
    return report


def _scheme_arm(scheme: str, base: TrainConfig, mixture: DatasetMixture, cache: SceneCache, out_dir) -> ArmResult:
    if len(mixture.splits) < 2:
        raise ValueError("the scheme suite needs at least one source dataset and one target dataset")
    target = mixture.splits[-1].id
    sources = [s.id for s in mixture.splits[:-1]]
    target_only = _restrict(mixture, [target])
    label_mode = base.label_mode if base.label_mode != "separate" else "unified"
    if scheme == "from_scratch":
        cfg = base.replace(scheme="from_scratch", label_mode=label_mode)
        arm, _ = run_arm(scheme, cfg, target_only, [target], cache, {"scheme": scheme})
        return arm
    if scheme == "joint":
        cfg = base.replace(scheme="joint", label_mode=label_mode)
        arm, _ = run_arm(scheme, cfg, mixture, [target], cache, {"scheme": scheme})
        return arm
    if scheme != "fine_tune":
        raise ValueError(f"unknown scheme {scheme!r}")
    pre_cfg = base.replace(scheme="joint" if len(sources) > 1 else "from_scratch", label_mode=label_mode)
    pre = train(_restrict(mixture, sources), pre_cfg, cache=cache)
    ckpt_dir = Path(out_dir) if out_dir is not None else Path(base.out_dir)
    ckpt = ckpt_dir / "ablate_scheme_pretrain.ckpt.json"
    save_training_checkpoint(ckpt, pre.model, None, 0)
    cfg = base.replace(scheme="fine_tune", init_checkpoint=str(ckpt), label_mode=label_mode)
    arm, _ = run_arm(scheme, cfg, target_only, [target], cache, {"scheme": scheme})
    arm.train_seconds += pre.seconds
    return arm
