"""Scenes: point clouds with labeled boxes, their file format, and the
data-side transforms applied before the network (capping, augmentation,
voxelization), plus a procedural generator of synthetic rooms."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .geometry import Box3D

SCENE_FORMAT_VERSION = 1
SCENE_SUFFIX = ".scene.jsonl"
DEFAULT_POINT_LIMIT = 100_000


class SceneFormatError(ValueError):
    """A scene file does not follow the ``.scene.jsonl`` schema."""


@dataclass(frozen=True)
class Scene:
    points: np.ndarray  # (N, 6): x, y, z, r, g, b
    gt_boxes: tuple[tuple[Box3D, str], ...] = ()
    dataset_id: str = "default"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 6:
            raise ValueError(f"points must be (N, 6), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("a scene needs at least one point")
        boxes = tuple((b, str(c)) for b, c in self.gt_boxes)
        for _, cls in boxes:
            if not cls.strip():
                raise ValueError("gt box class names must be nonempty")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "gt_boxes", boxes)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def boxes(self) -> list[Box3D]:
        return [b for b, _ in self.gt_boxes]

    @property
    def classes(self) -> list[str]:
        return [c for _, c in self.gt_boxes]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.points).tobytes())
        h.update(self.dataset_id.encode())
        for b, c in self.gt_boxes:
            h.update(b.as_array().tobytes())
            h.update(c.encode())
        return h.hexdigest()


# ------------------------------------------------------------------ file I/O


def _box_record(box: Box3D, cls: str) -> dict:
    return {"center": list(box.center), "size": list(box.size), "yaw": box.yaw, "class": cls}


def dumps_scene(scene: Scene) -> str:
    header = {"version": SCENE_FORMAT_VERSION, "dataset_id": scene.dataset_id, "num_points": scene.num_points}
    points = {"points": scene.points.tolist()}
    boxes = {"boxes": [_box_record(b, c) for b, c in scene.gt_boxes]}
    return "\n".join(json.dumps(r, allow_nan=False) for r in (header, points, boxes)) + "\n"


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(dumps_scene(scene), encoding="utf-8")


def _parse_box(rec, where: str) -> tuple[Box3D, str]:
    if not isinstance(rec, dict):
        raise SceneFormatError(f"{where}: box record must be an object")
    missing = {"center", "size", "yaw", "class"} - set(rec)
    if missing:
        raise SceneFormatError(f"{where}: box record missing fields {sorted(missing)}")
    for key in ("center", "size"):
        v = rec[key]
        if not isinstance(v, list) or len(v) != 3:
            raise SceneFormatError(f"{where}: field '{key}' must be a list of 3 numbers")
    if not isinstance(rec["class"], str) or not rec["class"].strip():
        raise SceneFormatError(f"{where}: field 'class' must be a nonempty string")
    try:
        box = Box3D(tuple(rec["center"]), tuple(rec["size"]), float(rec["yaw"]))
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f"{where}: invalid box: {exc}") from None
    return box, rec["class"]


def loads_scene(text: str, source: str = "<string>") -> Scene:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) != 3:
        raise SceneFormatError(f"{source}: expected 3 records, found {len(lines)}")
    recs = []
    for i, ln in enumerate(lines, start=1):
        try:
            recs.append(json.loads(ln))
        except json.JSONDecodeError as exc:
            raise SceneFormatError(f"{source}:{i}: invalid JSON: {exc.msg}") from None
    header, pts_rec, box_rec = recs
    if not isinstance(header, dict) or {"version", "dataset_id", "num_points"} - set(header):
        raise SceneFormatError(f"{source}:1: header needs 'version', 'dataset_id', 'num_points'")
    if header["version"] != SCENE_FORMAT_VERSION:
        raise SceneFormatError(f"{source}:1: unsupported version {header['version']!r}")
    if not isinstance(pts_rec, dict) or "points" not in pts_rec:
        raise SceneFormatError(f"{source}:2: missing field 'points'")
    raw = pts_rec["points"]
    if not isinstance(raw, list) or not raw:
        raise SceneFormatError(f"{source}:2: field 'points' must be a nonempty list (N >= 1)")
    for j, row in enumerate(raw):
        if not isinstance(row, list) or len(row) != 6:
            n = len(row) if isinstance(row, list) else "non-list"
            raise SceneFormatError(f"{source}:2: points[{j}] has {n} columns, expected 6 (x,y,z,r,g,b)")
    try:
        points = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError):
        raise SceneFormatError(f"{source}:2: field 'points' must contain numbers") from None
    if points.shape[0] != header["num_points"]:
        raise SceneFormatError(
            f"{source}:1: num_points={header['num_points']} but {points.shape[0]} points present"
        )
    if not isinstance(box_rec, dict) or not isinstance(box_rec.get("boxes"), list):
        raise SceneFormatError(f"{source}:3: field 'boxes' must be a list")
    boxes = tuple(_parse_box(r, f"{source}:3: boxes[{k}]") for k, r in enumerate(box_rec["boxes"]))
    return Scene(points, boxes, str(header["dataset_id"]))


def load_scene(path: str | Path) -> Scene:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return loads_scene(path.read_text(encoding="utf-8"), source=str(path))


def load_scene_dir(directory: str | Path) -> list[Scene]:
    files = sorted(Path(directory).glob("*" + SCENE_SUFFIX))
    return [load_scene(f) for f in files]


# ------------------------------------------------------------------ point cap


def cap_points(scene: Scene, limit: int = DEFAULT_POINT_LIMIT, seed: int = 0) -> Scene:
    """Uniformly subsample without replacement down to ``limit`` points.

    Scenes already within the limit are returned unchanged; boxes are never
    dropped.
    """
    if limit < 1:
        raise ValueError(f"limit must be >= 1, got {limit}")
    if scene.num_points <= limit:
        return scene
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(scene.num_points, size=limit, replace=False))
    return replace(scene, points=scene.points[keep])


# ------------------------------------------------------------------ voxels


@dataclass(frozen=True)
class VoxelGrid:
    """Occupied voxels in sorted (lexicographic) coordinate order.

    ``point_voxel[i]`` is the row of the voxel holding point ``i``.
    """

    voxel_size: float
    coords: np.ndarray  # (K, 3) int64
    features: np.ndarray  # (K, 6) mean point feature
    counts: np.ndarray  # (K,)
    point_voxel: np.ndarray  # (N,)

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.point_voxel == k)

    def unpool(self, voxel_values: np.ndarray) -> np.ndarray:
        return np.asarray(voxel_values)[self.point_voxel]


def voxelize(scene: Scene | np.ndarray, voxel_size: float = 0.02) -> VoxelGrid:
    if not voxel_size > 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    pts = scene.points if isinstance(scene, Scene) else np.asarray(scene, dtype=np.float64)
    ijk = np.floor(pts[:, :3] / voxel_size).astype(np.int64)
    coords, inverse, counts = np.unique(ijk, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((coords.shape[0], pts.shape[1]))
    np.add.at(sums, inverse, pts)
    feats = sums / counts[:, None]
    return VoxelGrid(float(voxel_size), coords, feats, counts, inverse)


# ------------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    flip_prob: float = 0.5
    rotation_range: tuple[float, float] = (-math.pi, math.pi)
    scale_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"scale_range must be positive and ordered, got {self.scale_range}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")


def flip_x(scene: Scene) -> Scene:
    pts = scene.points.copy()
    pts[:, 0] = -pts[:, 0]
    boxes = tuple(
        (Box3D((-b.center[0], b.center[1], b.center[2]), b.size, -b.yaw), c) for b, c in scene.gt_boxes
    )
    return Scene(pts, boxes, scene.dataset_id)


def rotate_z(scene: Scene, angle: float) -> Scene:
    c, s = math.cos(angle), math.sin(angle)
    pts = scene.points.copy()
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    boxes = []
    for b, cls in scene.gt_boxes:
        bx, by, bz = b.center
        boxes.append((Box3D((c * bx - s * by, s * bx + c * by, bz), b.size, b.yaw + angle), cls))
    return Scene(pts, tuple(boxes), scene.dataset_id)


def scale(scene: Scene, factor: float) -> Scene:
    if not factor > 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    pts = scene.points.copy()
    pts[:, :3] *= factor
    boxes = tuple(
        (Box3D(tuple(v * factor for v in b.center), tuple(v * factor for v in b.size), b.yaw), c)
        for b, c in scene.gt_boxes
    )
    return Scene(pts, boxes, scene.dataset_id)


def augment(scene: Scene, seed: int, config: AugmentConfig = AugmentConfig()) -> Scene:
    """Random flip, z-rotation and scaling applied to points and boxes alike."""
    if not config.enabled:
        return scene
    rng = np.random.default_rng(seed)
    do_flip = rng.random() < config.flip_prob
    angle = rng.uniform(*config.rotation_range)
    factor = rng.uniform(*config.scale_range)
    out = flip_x(scene) if do_flip else scene
    if angle != 0.0:
        out = rotate_z(out, angle)
    if factor != 1.0:
        out = scale(out, factor)
    return out


# ------------------------------------------------------------------ synthetic rooms

# base footprint/height (m) for common indoor classes; others get a size
# derived from the class name hash
_CLASS_SIZES = {
    "bed": (2.0, 1.6, 0.6),
    "table": (1.4, 0.8, 0.75),
    "chair": (0.5, 0.5, 0.9),
    "sofa": (2.0, 0.9, 0.8),
    "cabinet": (1.0, 0.5, 1.0),
    "bookshelf": (1.0, 0.35, 1.8),
    "desk": (1.2, 0.7, 0.75),
    "toilet": (0.45, 0.7, 0.8),
    "bathtub": (1.6, 0.75, 0.55),
    "refrigerator": (0.8, 0.7, 1.8),
    "sink": (0.6, 0.5, 0.35),
    "trash can": (0.4, 0.4, 0.6),
    "door": (0.9, 0.15, 2.0),
}


def _name_digest(name: str) -> np.ndarray:
    d = hashlib.sha256(name.encode()).digest()
    return np.frombuffer(d, dtype=np.uint8).astype(np.float64) / 255.0


def class_color(name: str) -> np.ndarray:
    """A saturated, bright RGB colour fixed by the class name."""
    u = _name_digest(name)
    hue = u[0]
    i = int(hue * 6) % 6
    f = hue * 6 - int(hue * 6)
    v, s = 0.9, 0.75
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def class_base_size(name: str) -> np.ndarray:
    if name in _CLASS_SIZES:
        return np.array(_CLASS_SIZES[name])
    u = _name_digest(name)
    return np.array([0.4 + 1.2 * u[1], 0.4 + 1.2 * u[2], 0.4 + 1.4 * u[3]])


@dataclass(frozen=True)
class SyntheticSpec:
    classes: tuple[str, ...] = ("chair", "table", "sofa", "bed", "cabinet")
    num_objects: tuple[int, int] = (3, 6)
    room: tuple[float, float, float] = (5.5, 5.5, 2.5)
    points_per_object: tuple[int, int] = (150, 300)
    clutter_fraction: float = 0.4
    size_jitter: float = 0.25
    random_yaw: bool = False
    color_noise: float = 0.02
    margin: float = 0.3
    dataset_id: str = "synthetic"
    seed: int = 0
    max_attempts: int = 200

    def __post_init__(self):
        if not self.classes:
            raise ValueError("synthetic spec needs at least one class")
        if min(self.room) <= 0:
            raise ValueError(f"room extents must be positive, got {self.room}")
        lo, hi = self.num_objects
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid num_objects range {self.num_objects}")
        if not 0.0 <= self.clutter_fraction < 1.0:
            raise ValueError("clutter_fraction must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        conv = dict(d)
        for key in ("classes", "num_objects", "room", "points_per_object"):
            if key in conv:
                conv[key] = tuple(conv[key])
        return cls(**conv)

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticSpec":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        return cls.from_dict(data)


# face shading: top, +x, +y, -x, -y
_FACE_SHADE = (1.0, 0.8, 0.62, 0.8, 0.62)


def _jittered_grid(rng, a: float, b: float, n: int) -> np.ndarray:
    """About ``n`` stratified samples of the rectangle [0, a] x [0, b]."""
    if n <= 0:
        return np.zeros((0, 2))
    step = math.sqrt(a * b / n)
    na, nb = max(1, round(a / step)), max(1, round(b / step))
    ia, ib = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
    u = (ia.reshape(-1) + rng.random(na * nb)) * (a / na)
    v = (ib.reshape(-1) + rng.random(na * nb)) * (b / nb)
    return np.c_[u, v]


def _sample_object_surface(rng, box: Box3D, n: int, color: np.ndarray, noise: float) -> np.ndarray:
    w, l, h = box.size
    areas = np.array([w * l, l * h, w * h, l * h, w * h])
    counts = np.round(areas / areas.sum() * n).astype(int)
    chunks = []
    for face, k in enumerate(counts):
        if face == 0:
            uv = _jittered_grid(rng, w, l, k)
            local = np.c_[uv[:, 0] - w / 2, uv[:, 1] - l / 2, np.full(len(uv), h / 2)]
        elif face in (1, 3):
            uv = _jittered_grid(rng, l, h, k)
            sx = 0.5 if face == 1 else -0.5
            local = np.c_[np.full(len(uv), sx * w), uv[:, 0] - l / 2, uv[:, 1] - h / 2]
        else:
            uv = _jittered_grid(rng, w, h, k)
            sy = 0.5 if face == 2 else -0.5
            local = np.c_[uv[:, 0] - w / 2, np.full(len(uv), sy * l), uv[:, 1] - h / 2]
        if len(local) == 0:
            continue
        rgb = np.clip(color * _FACE_SHADE[face] + rng.normal(0, noise, (len(local), 3)), 0.0, 1.0)
        chunks.append(np.c_[local, rgb])
    pts = np.vstack(chunks)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y + box.center[0]
    pts[:, 1] = s * x + c * y + box.center[1]
    pts[:, 2] += box.center[2]
    return pts


def generate_synthetic(seed: int | None = None, spec: SyntheticSpec = SyntheticSpec()) -> Scene:
    """Place non-overlapping cuboids on the floor of a room and sample points.

    Object points lie on the top and four side faces with a per-face shade
    of the class colour; clutter points cover the floor and two walls.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    rx, ry, rz = spec.room
    n_obj = int(rng.integers(spec.num_objects[0], spec.num_objects[1] + 1))
    placed: list[tuple[Box3D, str, float]] = []
    for _ in range(n_obj):
        for _attempt in range(spec.max_attempts):
            cls = spec.classes[int(rng.integers(len(spec.classes)))]
            size = class_base_size(cls) * rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter, 3)
            size[2] = min(size[2], rz * 0.9)
            yaw = rng.uniform(-math.pi, math.pi) if spec.random_yaw else 0.0
            radius = 0.5 * math.hypot(size[0], size[1])
            half = (radius, radius) if spec.random_yaw else (size[0] / 2, size[1] / 2)
            lo_x, hi_x = half[0] + spec.margin, rx - half[0] - spec.margin
            lo_y, hi_y = half[1] + spec.margin, ry - half[1] - spec.margin
            if lo_x >= hi_x or lo_y >= hi_y:
                continue
            cx, cy = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
            box = Box3D((cx, cy, size[2] / 2), tuple(size), yaw)
            if all(_separated(box, other, spec.margin, spec.random_yaw) for other, _, _ in placed):
                placed.append((box, cls, radius))
                break
        else:
            raise ValueError(
                f"could not place {n_obj} objects in room {spec.room} after {spec.max_attempts} attempts"
            )

    chunks = []
    for box, cls, _ in placed:
        n = int(rng.integers(spec.points_per_object[0], spec.points_per_object[1] + 1))
        chunks.append(_sample_object_surface(rng, box, n, class_color(cls), spec.color_noise))
    n_obj_pts = int(sum(len(c) for c in chunks))
    n_clutter = int(round(spec.clutter_fraction / (1 - spec.clutter_fraction) * max(n_obj_pts, 1)))
    if n_obj_pts == 0:
        n_clutter = max(n_clutter, 1)
    if n_clutter:
        chunks.append(_clutter(rng, spec, n_clutter))
    points = np.vstack(chunks)
    boxes = tuple((b, c) for b, c, _ in placed)
    return Scene(points, boxes, spec.dataset_id)


def _separated(a: Box3D, b: Box3D, margin: float, rotated: bool) -> bool:
    if rotated:
        ra = 0.5 * math.hypot(a.size[0], a.size[1])
        rb = 0.5 * math.hypot(b.size[0], b.size[1])
        return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) >= ra + rb + margin
    dx = abs(a.center[0] - b.center[0]) - (a.size[0] + b.size[0]) / 2
    dy = abs(a.center[1] - b.center[1]) - (a.size[1] + b.size[1]) / 2
    return max(dx, dy) >= margin


def _clutter(rng, spec: SyntheticSpec, n: int) -> np.ndarray:
    """Floor plus the two walls at y = ry and x = 0, with area-proportional counts."""
    rx, ry, rz = spec.room
    areas = np.array([rx * ry, rx * rz, ry * rz])
    n_floor, n_wall_x, n_wall_y = np.round(areas / areas.sum() * n).astype(int)
    floor = _jittered_grid(rng, rx, ry, n_floor)
    floor = np.c_[floor, np.zeros(len(floor))]
    wx = _jittered_grid(rng, rx, rz, n_wall_x)
    wx = np.c_[wx[:, 0], np.full(len(wx), ry), wx[:, 1]]
    wy = _jittered_grid(rng, ry, rz, n_wall_y)
    wy = np.c_[np.zeros(len(wy)), wy[:, 0], wy[:, 1]]
    xyz = np.vstack([floor, wx, wy])
    grey = np.r_[np.full(len(floor), 0.45), np.full(len(wx) + len(wy), 0.75)]
    rgb = np.clip(grey[:, None] + rng.normal(0, spec.color_noise, (len(xyz), 3)), 0.0, 1.0)
    return np.c_[xyz, rgb]


def scene_summary(scenes: Sequence[Scene]) -> dict:
    return {
        "scenes": len(scenes),
        "points": int(sum(s.num_points for s in scenes)),
        "boxes": int(sum(len(s.gt_boxes) for s in scenes)),
    }
