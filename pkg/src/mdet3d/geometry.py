"""Oriented 3D boxes: overlap metrics, 8-value encoding and NMS.

A box is a center, a size ``(w, l, h)`` along its own x/y/z axes and a yaw
about world z.  Rotated overlap is computed in bird's-eye view and multiplied
by the vertical interval overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

_HALF_PI = math.pi / 2


def normalize_yaw(yaw: float) -> float:
    """Map an angle into (-pi, pi]."""
    y = math.fmod(float(yaw), 2 * math.pi)
    if y <= -math.pi:
        y += 2 * math.pi
    elif y > math.pi:
        y -= 2 * math.pi
    return y


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("Box3D needs 3 center and 3 size components")
        if not all(math.isfinite(v) for v in center + size + (float(self.yaw),)):
            raise ValueError(f"Box3D has non-finite values: {center}, {size}, {self.yaw}")
        if min(size) <= 0:
            raise ValueError(f"Box3D size must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def volume(self) -> float:
        w, l, h = self.size
        return w * l * h

    def as_array(self) -> np.ndarray:
        return np.array(self.center + self.size + (self.yaw,))

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Box3D":
        return cls(tuple(a[0:3]), tuple(a[3:6]), float(a[6]))

    def bev_corners(self) -> np.ndarray:
        """Footprint corners, counter-clockwise, shape (4, 2)."""
        w, l, _ = self.size
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[-w / 2, -l / 2], [w / 2, -l / 2], [w / 2, l / 2], [-w / 2, l / 2]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])

    def z_range(self) -> tuple[float, float]:
        return self.center[2] - self.size[2] / 2, self.center[2] + self.size[2] / 2

    def contains(self, pts: np.ndarray, tol: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))[:, :3]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        d = pts - np.array(self.center)
        lx = c * d[:, 0] + s * d[:, 1]
        ly = -s * d[:, 0] + c * d[:, 1]
        hw, hl, hh = (v / 2 + tol for v in self.size)
        return (np.abs(lx) <= hw) & (np.abs(ly) <= hl) & (np.abs(d[:, 2]) <= hh)


@dataclass(frozen=True)
class BoxEncoding:
    """Face distances ``(-x, +x, -y, +y, -z, +z)`` in the box frame plus
    ``rot = (sin yaw, cos yaw)``."""

    distances: tuple[float, float, float, float, float, float]
    rot: tuple[float, float]

    def as_array(self) -> np.ndarray:
        return np.array(self.distances + self.rot)


# ------------------------------------------------------------------ polygons


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW ``clip``.

    Points on a clip edge count as inside.
    """
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, output = output, []
        s = inp[-1]
        ss = side(s)
        for e in inp:
            es = side(e)
            if es >= 0:
                if ss < 0:
                    output.append(_intersect(s, e, ss, es))
                output.append(e)
            elif ss >= 0:
                output.append(_intersect(s, e, ss, es))
            s, ss = e, es
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def _intersect(s, e, ss, es):
    t = ss / (ss - es)
    return (s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1]))


# ------------------------------------------------------------------ overlap


def _interval_overlap(a0: float, a1: float, b0: float, b1: float) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def _quarter_turns(yaw: float) -> int | None:
    """Number of quarter turns if ``yaw`` is exactly a multiple of pi/2."""
    if yaw == 0.0:
        return 0
    if yaw == _HALF_PI:
        return 1
    if yaw == math.pi:
        return 2
    if yaw == -_HALF_PI:
        return 3
    return None


def _aligned_extents(box: Box3D, turns: int) -> tuple[float, float]:
    w, l, _ = box.size
    return (l, w) if turns % 2 else (w, l)


def intersection_volume(a: Box3D, b: Box3D) -> float:
    za = a.z_range()
    zb = b.z_range()
    dz = _interval_overlap(za[0], za[1], zb[0], zb[1])
    if dz == 0.0:
        return 0.0
    ta, tb = _quarter_turns(a.yaw), _quarter_turns(b.yaw)
    if ta is not None and tb is not None:
        # exact axis-aligned path
        wa, la = _aligned_extents(a, ta)
        wb, lb = _aligned_extents(b, tb)
        (ax, ay, _), (bx, by, _) = a.center, b.center
        dx = _interval_overlap(ax - wa / 2, ax + wa / 2, bx - wb / 2, bx + wb / 2)
        dy = _interval_overlap(ay - la / 2, ay + la / 2, by - lb / 2, by + lb / 2)
        return dx * dy * dz
    poly = clip_polygon(a.bev_corners(), b.bev_corners())
    area = abs(polygon_area(poly)) if len(poly) >= 3 else 0.0
    return area * dz


def iou(a: Box3D, b: Box3D) -> float:
    """Volumetric intersection over union in [0, 1]; exactly symmetric."""
    ka, kb = tuple(a.as_array()), tuple(b.as_array())
    if ka == kb:
        return 1.0  # clipping a rotated box against itself loses a few ulps
    if kb < ka:
        a, b = b, a  # clipping order changes rounding
    inter = intersection_volume(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return min(1.0, max(0.0, inter / union))


def _corners3d(box: Box3D) -> np.ndarray:
    bev = box.bev_corners()
    z0, z1 = box.z_range()
    return np.vstack([np.c_[bev, np.full(4, z0)], np.c_[bev, np.full(4, z1)]])


def diou_distance(a: Box3D, b: Box3D) -> float:
    """``1 - IoU + |ca - cb|^2 / diag^2`` where diag spans the smallest
    axis-aligned box enclosing both."""
    ca, cb = np.array(a.center), np.array(b.center)
    rho2 = float(np.sum((ca - cb) ** 2))
    if rho2 == 0.0:
        return 1.0 - iou(a, b)
    pts = np.vstack([_corners3d(a), _corners3d(b)])
    ext = pts.max(axis=0) - pts.min(axis=0)
    c2 = float(np.sum(ext**2))
    return 1.0 - iou(a, b) + rho2 / c2


# ------------------------------------------------------------------ encoding


def encode_box(box: Box3D, ref: Sequence[float]) -> BoxEncoding:
    """Distances from ``ref`` to the six faces, measured in the box frame."""
    ref = np.asarray(ref, dtype=np.float64)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    d = ref - np.array(box.center)
    lx = c * d[0] + s * d[1]
    ly = -s * d[0] + c * d[1]
    lz = d[2]
    w, l, h = box.size
    dist = (w / 2 + lx, w / 2 - lx, l / 2 + ly, l / 2 - ly, h / 2 + lz, h / 2 - lz)
    if min(dist) <= 0:
        raise ValueError(f"reference point {tuple(ref)} is not strictly inside the box: distances {dist}")
    return BoxEncoding(tuple(float(v) for v in dist), (s, c))


def decode_box(enc: BoxEncoding | Sequence[float], ref: Sequence[float]) -> Box3D:
    if isinstance(enc, BoxEncoding):
        vals = enc.distances + enc.rot
    else:
        vals = tuple(float(v) for v in enc)
    dmx, dpx, dmy, dpy, dmz, dpz, s, c = vals
    yaw = math.atan2(s, c)
    ox, oy, oz = (dpx - dmx) / 2, (dpy - dmy) / 2, (dpz - dmz) / 2
    cy, sy = math.cos(yaw), math.sin(yaw)
    ref = [float(v) for v in ref]
    center = (ref[0] + cy * ox - sy * oy, ref[1] + sy * ox + cy * oy, ref[2] + oz)
    return Box3D(center, (dmx + dpx, dmy + dpy, dmz + dpz), yaw)


# ------------------------------------------------------------------ NMS


def nms(
    detections: Sequence[tuple[Box3D, float, int]],
    iou_threshold: float,
    class_agnostic: bool = False,
) -> list[int]:
    """Greedy suppression in descending score order; returns kept indices.

    Equal scores keep input order.  A box is suppressed when its IoU with an
    already kept box of the same class (any class if ``class_agnostic``)
    exceeds ``iou_threshold``.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    scores = np.array([float(d[1]) for d in detections])
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms: scores must be finite")
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for i in order:
        box, _, cls = detections[i]
        suppressed = False
        for k in kept:
            kbox, _, kcls = detections[k]
            if (class_agnostic or kcls == cls) and iou(box, kbox) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(int(i))
    return kept


# ------------------------------------------------------------------ differentiable path


@dataclass
class BoxBatch:
    """P boxes as tensors: center (P,3), size (P,3), cos/sin of yaw (P,)."""

    center: Tensor
    size: Tensor
    cos: Tensor
    sin: Tensor

    def __len__(self) -> int:
        return self.center.shape[0]

    def to_boxes(self) -> list[Box3D]:
        yaw = np.arctan2(self.sin.data, self.cos.data)
        return [
            Box3D(tuple(self.center.data[i]), tuple(self.size.data[i]), float(yaw[i]))
            for i in range(len(self))
        ]

    def take(self, index) -> "BoxBatch":
        return BoxBatch(
            T.take(self.center, index), T.take(self.size, index), T.take(self.cos, index), T.take(self.sin, index)
        )

    @classmethod
    def from_boxes(cls, boxes: Sequence[Box3D]) -> "BoxBatch":
        arr = np.array([b.as_array() for b in boxes]).reshape(-1, 7)
        return cls(
            T.as_tensor(arr[:, 0:3]),
            T.as_tensor(arr[:, 3:6]),
            T.as_tensor(np.cos(arr[:, 6])),
            T.as_tensor(np.sin(arr[:, 6])),
        )


def decode_boxes(raw: Tensor, refs: np.ndarray) -> BoxBatch:
    """Differentiable decode of raw (M, 8) head outputs.

    The six distance channels go through ``exp``; the rotation pair is
    normalised onto the unit circle, which equals decoding to
    ``atan2(s, c)`` and taking cos/sin.
    """
    dist = T.exp(raw[:, 0:6])
    s_raw, c_raw = raw[:, 6], raw[:, 7]
    norm = T.sqrt(s_raw * s_raw + c_raw * c_raw + 1e-12)
    sin, cos = s_raw / norm, c_raw / norm
    dmx, dpx, dmy, dpy, dmz, dpz = (dist[:, i] for i in range(6))
    size = T.stack([dmx + dpx, dmy + dpy, dmz + dpz], axis=1)
    ox, oy, oz = (dpx - dmx) * 0.5, (dpy - dmy) * 0.5, (dpz - dmz) * 0.5
    refs = np.asarray(refs, dtype=np.float64)
    cx = cos * ox - sin * oy + refs[:, 0]
    cy = sin * ox + cos * oy + refs[:, 1]
    cz = oz + refs[:, 2]
    return BoxBatch(T.stack([cx, cy, cz], axis=1), size, cos, sin)


_CORNER_SIGNS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def _bev_corners_t(b: BoxBatch, origin: np.ndarray) -> tuple[Tensor, Tensor]:
    """Corner x and y tensors, each (P, 4), CCW, relative to ``origin`` (P, 2)."""
    hw = b.size[:, 0:1] * 0.5
    hl = b.size[:, 1:2] * 0.5
    lx = hw * _CORNER_SIGNS[:, 0]
    ly = hl * _CORNER_SIGNS[:, 1]
    c = T.reshape(b.cos, (-1, 1))
    s = T.reshape(b.sin, (-1, 1))
    x = c * lx - s * ly + (b.center[:, 0:1] - origin[:, 0:1])
    y = s * lx + c * ly + (b.center[:, 1:2] - origin[:, 1:2])
    return x, y


def _clipped_edge_area(px, py, qx, qy, same_dir_counts: bool) -> Tensor:
    """Boundary-integral contribution of polygon P's edges lying inside Q.

    For edge ``p + t d`` the part inside convex CCW Q is ``[t0, t1]``; its
    contribution to twice the intersection area is ``(t1 - t0) * cross(p, d)``.
    Collinear edges count only for the first polygon and only when the two
    edges run in the same direction, so shared boundary is integrated once.
    """
    dx = T.concat([px[:, 1:], px[:, :1]], axis=1) - px  # (P, 4)
    dy = T.concat([py[:, 1:], py[:, :1]], axis=1) - py
    qdx = T.concat([qx[:, 1:], qx[:, :1]], axis=1) - qx
    qdy = T.concat([qy[:, 1:], qy[:, :1]], axis=1) - qy
    # outward normal of Q's edge j: (qdy, -qdx); broadcast edges i over half-planes j
    nx = T.reshape(qdy, (-1, 1, 4))
    ny = T.reshape(-qdx, (-1, 1, 4))
    rx = T.reshape(px, (-1, 4, 1)) - T.reshape(qx, (-1, 1, 4))
    ry = T.reshape(py, (-1, 4, 1)) - T.reshape(qy, (-1, 1, 4))
    num = nx * rx + ny * ry  # (P, 4, 4)
    den = nx * T.reshape(dx, (-1, 4, 1)) + ny * T.reshape(dy, (-1, 4, 1))

    scale = (np.abs(nx.data) + np.abs(ny.data)) * (
        np.abs(dx.data)[:, :, None] + np.abs(dy.data)[:, :, None]
    )
    parallel = np.abs(den.data) <= 1e-12 * scale
    nscale = (np.abs(nx.data) + np.abs(ny.data)) * (np.abs(rx.data) + np.abs(ry.data) + 1.0)
    collinear = parallel & (np.abs(num.data) <= 1e-12 * nscale)
    outside = parallel & (num.data > 0) & ~collinear
    if same_dir_counts:
        same_dir = (nx.data * dy.data[:, :, None] - ny.data * dx.data[:, :, None]) > 0
        outside |= collinear & ~same_dir
    else:
        outside |= collinear
    dead = outside.any(axis=2)  # (P, 4)

    safe_den = T.where(parallel, 1.0, den)
    t = -num / safe_den
    entering = (~parallel) & (den.data < 0)
    exiting = (~parallel) & (den.data > 0)
    t_lo = T.amax(T.where(entering, t, 0.0), axis=2)
    t_hi = T.amin(T.where(exiting, t, 1.0), axis=2)
    t_lo = T.maximum(t_lo, 0.0)
    t_hi = T.minimum(t_hi, 1.0)
    length = T.relu(t_hi - t_lo) * (~dead)
    cross = px * dy - py * dx
    return T.sum(length * cross, axis=1)


def bev_intersection_area(a: BoxBatch, b: BoxBatch) -> Tensor:
    origin = 0.5 * (a.center.data[:, :2] + b.center.data[:, :2])
    ax, ay = _bev_corners_t(a, origin)
    bx, by = _bev_corners_t(b, origin)
    twice = _clipped_edge_area(ax, ay, bx, by, True) + _clipped_edge_area(bx, by, ax, ay, False)
    return T.relu(twice * 0.5)


def iou_t(a: BoxBatch, b: BoxBatch) -> Tensor:
    """Differentiable row-wise IoU of two equally sized box batches."""
    area = bev_intersection_area(a, b)
    a_top = a.center[:, 2] + a.size[:, 2] * 0.5
    a_bot = a.center[:, 2] - a.size[:, 2] * 0.5
    b_top = b.center[:, 2] + b.size[:, 2] * 0.5
    b_bot = b.center[:, 2] - b.size[:, 2] * 0.5
    dz = T.relu(T.minimum(a_top, b_top) - T.maximum(a_bot, b_bot))
    inter = area * dz
    vol_a = a.size[:, 0] * a.size[:, 1] * a.size[:, 2]
    vol_b = b.size[:, 0] * b.size[:, 1] * b.size[:, 2]
    return inter / (vol_a + vol_b - inter)


def diou_distance_t(a: BoxBatch, b: BoxBatch) -> Tensor:
    """Differentiable row-wise DIoU distance, shape (P,)."""
    overlap = iou_t(a, b)
    origin = 0.5 * (a.center.data[:, :2] + b.center.data[:, :2])
    ax, ay = _bev_corners_t(a, origin)
    bx, by = _bev_corners_t(b, origin)
    xs = T.concat([ax, bx], axis=1)
    ys = T.concat([ay, by], axis=1)
    ext_x = T.amax(xs, axis=1) - T.amin(xs, axis=1)
    ext_y = T.amax(ys, axis=1) - T.amin(ys, axis=1)
    top = T.maximum(a.center[:, 2] + a.size[:, 2] * 0.5, b.center[:, 2] + b.size[:, 2] * 0.5)
    bot = T.minimum(a.center[:, 2] - a.size[:, 2] * 0.5, b.center[:, 2] - b.size[:, 2] * 0.5)
    ext_z = top - bot
    c2 = ext_x * ext_x + ext_y * ext_y + ext_z * ext_z
    diff = a.center - b.center
    rho2 = T.sum(diff * diff, axis=1)
    return 1.0 - overlap + rho2 / c2
