"""Training configuration: a YAML file whose keys mirror :class:`TrainConfig`.

Unknown keys are rejected at every nesting level.  The environment variable
``UNIDET_SEED`` overrides ``seed``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from ..encoder import EncoderConfig
from ..scene import AugmentConfig, SyntheticSpec
from ..superpoint import SuperpointParams

SCHEMES = ("from_scratch", "fine_tune", "joint")
LABEL_MODES = ("separate", "partitioned", "unified")
MATCHERS = ("disentangled", "hungarian")
BACKBONES = ("sparse_unet", "pointwise_mlp")
WEIGHTINGS = ("proportional", "uniform")
SEED_ENV = "UNIDET_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "sparse_unet"
    voxel_size: float = 0.02
    stem: int = 16
    channels: tuple[int, ...] = (16, 32, 64)
    hidden: int = 64  # pointwise_mlp width

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ConfigError(f"backbone.kind must be one of {BACKBONES}, got {self.kind!r}")
        if not self.voxel_size > 0:
            raise ConfigError("backbone.voxel_size must be positive")
        if self.stem < 1 or self.hidden < 1 or any(c < 1 for c in self.channels):
            raise ConfigError("backbone widths must be positive")


@dataclass(frozen=True)
class DatasetConfig:
    """One named dataset: scene directories, or a synthetic generator."""

    id: str
    train: str | None = None
    val: str | None = None
    vocabulary: str | None = None  # built-in name or path to a vocabulary JSON
    classes: tuple[str, ...] | None = None
    weight: float | None = None
    synthetic: SyntheticSpec | None = None
    train_scenes: int = 0
    val_scenes: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.id:
            raise ConfigError("dataset id must be nonempty")
        if self.synthetic is None and self.train is None and self.val is None:
            raise ConfigError(f"dataset {self.id!r} needs 'train'/'val' directories or a 'synthetic' spec")
        if self.weight is not None and not self.weight > 0:
            raise ConfigError(f"dataset {self.id!r}: weight must be positive")
        if self.train_scenes < 0 or self.val_scenes < 0:
            raise ConfigError(f"dataset {self.id!r}: scene counts must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "from_scratch"
    label_mode: str = "unified"
    datasets: tuple[DatasetConfig, ...] = ()
    mixture_weighting: str = "proportional"
    # optimisation
    lr: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 8
    epochs: int = 1024
    poly_power: float = 0.9
    seed: int = 0
    # matching and loss
    lam: float = 0.25  # weight of the class term in the matching cost
    beta: float = 0.5  # weight of the classification loss
    j: int = 3  # candidate superpoints per gt box
    matching: str = "disentangled"
    # model
    backbone: BackboneConfig = BackboneConfig()
    encoder: EncoderConfig = EncoderConfig()
    head_depth: int = 2
    superpoints: SuperpointParams = SuperpointParams()
    augment: AugmentConfig = AugmentConfig()
    point_limit: int = 100_000
    # inference
    score_threshold: float = 0.1
    nms_iou: float = 0.5
    # fine_tune initialisation
    init_checkpoint: str | None = None
    # output
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if self.matching not in MATCHERS:
            raise ConfigError(f"matching must be one of {MATCHERS}, got {self.matching!r}")
        if self.mixture_weighting not in WEIGHTINGS:
            raise ConfigError(f"mixture_weighting must be one of {WEIGHTINGS}")
        for name in ("lr", "batch_size", "epochs", "poly_power", "j", "point_limit", "head_depth"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("weight_decay", "lam", "beta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 <= self.score_threshold <= 1 or not 0 <= self.nms_iou <= 1:
            raise ConfigError("score_threshold and nms_iou must lie in [0, 1]")
        ids = [d.id for d in self.datasets]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate dataset ids {ids}")
        if self.label_mode == "separate" and len(self.datasets) > 1:
            raise ConfigError("label_mode 'separate' trains one model per dataset; give exactly one dataset")
        if self.scheme == "joint" and len(self.datasets) < 2:
            raise ConfigError("scheme 'joint' needs at least two datasets")
        if self.scheme == "fine_tune" and not self.init_checkpoint:
            raise ConfigError("scheme 'fine_tune' needs init_checkpoint")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _to_plain(self)


# ------------------------------------------------------------------ (de)serialisation

_NESTED = {
    "backbone": BackboneConfig,
    "encoder": EncoderConfig,
    "superpoints": SuperpointParams,
    "augment": AugmentConfig,
}
_TUPLE_FIELDS = {"channels", "rotation_range", "scale_range", "classes", "num_objects", "room", "points_per_object"}


def _to_plain(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kw = {}
    for key, val in data.items():
        if key in _TUPLE_FIELDS and val is not None:
            val = tuple(val)
        kw[key] = val
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _dataset(data: Any, i: int) -> DatasetConfig:
    where = f"datasets[{i}]"
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    data = dict(data)
    if data.get("synthetic") is not None:
        syn = dict(data["synthetic"])
        syn.setdefault("dataset_id", data.get("id", "synthetic"))
        try:
            data["synthetic"] = SyntheticSpec.from_dict(syn)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.synthetic: {exc}") from None
    return _build(DatasetConfig, data, where)


def config_from_dict(data: dict | None) -> TrainConfig:
    data = dict(data or {})
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    kw: dict[str, Any] = {}
    for key, val in data.items():
        if key in _NESTED:
            kw[key] = _build(_NESTED[key], val, key)
        elif key == "datasets":
            kw[key] = tuple(_dataset(d, i) for i, d in enumerate(val or []))
        else:
            kw[key] = val
    for key in ("lr", "weight_decay", "poly_power", "lam", "beta", "score_threshold", "nms_iou"):
        if key in kw:
            kw[key] = float(kw[key])
    try:
        return TrainConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def apply_env(cfg: TrainConfig) -> TrainConfig:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        return cfg.replace(seed=int(raw))
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def load_config(path: str | Path, env: bool = True) -> TrainConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    cfg = config_from_dict(data)
    # relative data paths are taken relative to the config file
    base = path.parent
    resolved = []
    for d in cfg.datasets:
        upd = {}
        for key in ("train", "val", "vocabulary"):
            val = getattr(d, key)
            if val and key != "vocabulary" and not Path(val).is_absolute():
                upd[key] = str(base / val)
            elif key == "vocabulary" and val and val.endswith(".json") and not Path(val).is_absolute():
                upd[key] = str(base / val)
        resolved.append(dataclasses.replace(d, **upd))
    cfg = cfg.replace(datasets=tuple(resolved))
    if cfg.init_checkpoint and not Path(cfg.init_checkpoint).is_absolute():
        cfg = cfg.replace(init_checkpoint=str(base / cfg.init_checkpoint))
    return apply_env(cfg) if env else cfg


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def config_help() -> str:
    """Every config key with its default, one per line."""
    lines = ["config keys (defaults):"]
    d = TrainConfig().to_dict()
    for key, val in d.items():
        if key == "datasets":
            lines.append("  datasets: list of {id, train, val, vocabulary, classes, weight, synthetic, train_scenes, val_scenes, seed}")
        elif isinstance(val, dict):
            inner = ", ".join(f"{k}={v}" for k, v in val.items())
            lines.append(f"  {key}: {inner}")
        else:
            lines.append(f"  {key}: {val}")
    return "\n".join(lines)
