"""Point-feature extractors.

``SparseUNet`` runs sparse 3D convolutions over the occupied voxels of a
:class:`~mdet3d.scene.VoxelGrid` and broadcasts voxel features back to
points.  ``PointwiseMLP`` is a per-point MLP used when speed matters more
than receptive field.

Sparse tensors keep their coordinates in sorted lexicographic order and all
neighbour lookups go through :class:`CoordinateHash`; every accumulation is
done offset by offset in a fixed order, so results never depend on hash
table layout.
"""

from __future__ import annotations

import hashlib
import itertools
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, Module, uniform_init
from .scene import Scene, VoxelGrid
from .tensor import Tensor

_BITS = 21
_BIAS = 1 << (_BITS - 1)
_EMPTY = np.int64(-1)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)

# 3x3x3 kernel offsets in lexicographic order; index 13 is the centre
KERNEL_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER = 13


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Pack integer (x, y, z) into one non-negative int64 key."""
    c = np.asarray(coords, dtype=np.int64) + _BIAS
    if c.size and (c.min() < 0 or c.max() >= (1 << _BITS)):
        raise ValueError(f"voxel coordinates must lie in [-{_BIAS}, {_BIAS})")
    return (c[:, 0] << (2 * _BITS)) | (c[:, 1] << _BITS) | c[:, 2]


class CoordinateHash:
    """Open-addressing (linear probing) hash from voxel coordinate to row.

    Insertion and lookup are vectorised: all pending keys probe one slot per
    round, and slot conflicts inside a round are resolved in key order.
    """

    def __init__(self, coords: np.ndarray):
        keys = pack_coords(coords)
        n = keys.shape[0]
        cap = 8
        while cap < 2 * n:
            cap *= 2
        self.capacity = cap
        self._mask = np.int64(cap - 1)
        self.keys = np.full(cap, _EMPTY, dtype=np.int64)
        self.values = np.full(cap, -1, dtype=np.int64)
        pending = np.arange(n)
        slot = self._slot(keys)
        while pending.size:
            s = slot[pending]
            free = self.keys[s] == _EMPTY
            # first claimant of each free slot wins this round
            cand = pending[free]
            _, first = np.unique(s[free], return_index=True)
            win = cand[first]
            self.keys[slot[win]] = keys[win]
            self.values[slot[win]] = win
            won = np.zeros(n, dtype=bool)
            won[win] = True
            pending = pending[~won[pending]]
            slot[pending] = (slot[pending] + 1) & self._mask
        self.size = n

    def _slot(self, keys: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore"):
            h = keys.astype(np.uint64) * _GOLDEN
        return (h >> np.uint64(32)).astype(np.int64) & self._mask

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index for each query coordinate, -1 where absent."""
        coords = np.asarray(coords, dtype=np.int64)
        out = np.full(coords.shape[0], -1, dtype=np.int64)
        if coords.shape[0] == 0:
            return out
        inside = np.all((coords >= -_BIAS) & (coords < _BIAS), axis=1)
        q = np.flatnonzero(inside)
        keys = pack_coords(coords[q])
        slot = self._slot(keys)
        while q.size:
            tk = self.keys[slot]
            hit = tk == keys
            out[q[hit]] = self.values[slot[hit]]
            go = ~hit & (tk != _EMPTY)
            q, keys, slot = q[go], keys[go], (slot[go] + 1) & self._mask
        return out


def sort_coords(coords: np.ndarray) -> np.ndarray:
    """Row order that sorts coordinates lexicographically by (x, y, z)."""
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


@dataclass(frozen=True)
class KernelMap:
    """For each kernel offset, the (input row, output row) pairs it connects."""

    pairs: tuple[tuple[np.ndarray, np.ndarray], ...]
    num_out: int


@dataclass
class SparseTensor:
    coords: np.ndarray  # (K, 3) int64, sorted, unique
    feats: Tensor  # (K, C)
    stride: int = 1
    parent: "SparseTensor | None" = None  # finer tensor this was strided from
    down_map: KernelMap | None = None  # map used to produce this tensor from parent
    _hash: CoordinateHash | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (K, 3), got {self.coords.shape}")
        if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0]:
            raise ValueError(f"feats rows {self.feats.shape} do not match {self.coords.shape[0]} coords")
        if self.stride < 1:
            raise ValueError("stride must be positive")

    @classmethod
    def from_coords(cls, coords, feats: Tensor, stride: int = 1) -> "SparseTensor":
        coords = np.asarray(coords, dtype=np.int64)
        if np.unique(pack_coords(coords)).shape[0] != coords.shape[0]:
            raise ValueError("duplicate voxel coordinates")
        order = sort_coords(coords)
        if np.any(order != np.arange(len(order))):
            coords, feats = coords[order], T.take(feats, order)
        return cls(coords, feats, stride)

    @property
    def num_active(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    @property
    def hash(self) -> CoordinateHash:
        if self._hash is None:
            self._hash = CoordinateHash(self.coords)
        return self._hash


_MAP_CACHE: "OrderedDict[tuple, object]" = OrderedDict()
MAP_CACHE_SIZE = 512


def _cached(kind: str, coords: np.ndarray, build):
    """Kernel maps depend only on the coordinate set, so they are memoised
    by its bytes; repeated passes over one scene reuse them."""
    key = (kind, coords.shape[0], hashlib.sha1(coords.tobytes()).digest())
    hit = _MAP_CACHE.get(key)
    if hit is not None:
        _MAP_CACHE.move_to_end(key)
        return hit
    val = build()
    _MAP_CACHE[key] = val
    if len(_MAP_CACHE) > MAP_CACHE_SIZE:
        _MAP_CACHE.popitem(last=False)
    return val


def _gather_pairs(table: CoordinateHash, targets: np.ndarray) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """``targets`` is (27, K_out, 3); one batched lookup for all offsets."""
    k_out = targets.shape[1]
    src = table.lookup(targets.reshape(-1, 3)).reshape(27, k_out)
    rows = np.arange(k_out)
    return tuple((src[k][src[k] >= 0], rows[src[k] >= 0]) for k in range(27))


def submanifold_map(st: SparseTensor) -> KernelMap:
    def build():
        targets = st.coords[None, :, :] + KERNEL_OFFSETS[:, None, :]
        return KernelMap(_gather_pairs(st.hash, targets), st.num_active)

    return _cached("sub", st.coords, build)


def strided_map(st: SparseTensor) -> tuple[np.ndarray, KernelMap]:
    """Coarse coordinates ``unique(floor(c / 2))`` and the map gathering each
    coarse voxel ``o`` from fine voxels ``2 o + d``."""

    def build():
        coarse = np.unique(np.floor_divide(st.coords, 2), axis=0)  # lexicographically sorted
        targets = 2 * coarse[None, :, :] + KERNEL_OFFSETS[:, None, :]
        return coarse, KernelMap(_gather_pairs(st.hash, targets), coarse.shape[0])

    return _cached("down", st.coords, build)


def _apply_kernel(x: Tensor, weight: Tensor, bias: Tensor, kmap: KernelMap, transpose: bool) -> Tensor:
    """``out[o] = bias + sum_k sum_{(i, o) in pairs_k} x[i] @ W[k]``.

    With ``transpose`` the pairs are read as (output, input).  Within one
    offset each row appears at most once, so fancy-index accumulation is
    exact and the offset loop fixes the summation order.
    """
    xd, wd = x.data, weight.data
    n_out = kmap.num_out
    out = np.zeros((n_out, wd.shape[2]))
    pairs = [(b, a) if transpose else (a, b) for a, b in kmap.pairs]
    for k, (src, dst) in enumerate(pairs):
        if src.size:
            out[dst] += xd[src] @ wd[k]
    out += bias.data

    def bw(g):
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        for k, (src, dst) in enumerate(pairs):
            if src.size:
                gd = g[dst]
                gx[src] += gd @ wd[k].T
                gw[k] = xd[src].T @ gd
        return gx, gw, g.sum(axis=0)

    return T.custom_op("sparse_conv", out, (x, weight, bias), bw)


class SparseConvLayer(Module):
    MODES = ("submanifold", "strided", "transposed")

    def __init__(self, in_ch: int, out_ch: int, mode: str, rng: np.random.Generator):
        super().__init__()
        if mode not in self.MODES:
            raise ValueError(f"unknown sparse conv mode {mode!r}")
        self.in_ch, self.out_ch, self.mode = in_ch, out_ch, mode
        fan_in = 27 * in_ch
        self.param("weight", uniform_init(rng, (27, in_ch, out_ch), fan_in))
        self.param("bias", uniform_init(rng, (out_ch,), fan_in))

    def __call__(self, st: SparseTensor) -> SparseTensor:
        return sparse_conv(st, self)


def sparse_conv(st: SparseTensor, layer: SparseConvLayer) -> SparseTensor:
    if st.channels != layer.in_ch:
        raise T.ShapeError("sparse_conv", st.feats.shape, layer.weight.shape, detail="channels")
    if layer.mode == "submanifold":
        feats = _apply_kernel(st.feats, layer.weight, layer.bias, submanifold_map(st), False)
        return SparseTensor(st.coords, feats, st.stride, st.parent, st.down_map, st._hash)
    if layer.mode == "strided":
        coarse, kmap = strided_map(st)
        feats = _apply_kernel(st.feats, layer.weight, layer.bias, kmap, False)
        return SparseTensor(coarse, feats, st.stride * 2, parent=st, down_map=kmap)
    if st.parent is None or st.down_map is None:
        raise ValueError("transposed sparse conv needs a recorded strided coordinate map")
    fine = st.parent
    kmap = KernelMap(st.down_map.pairs, fine.num_active)
    feats = _apply_kernel(st.feats, layer.weight, layer.bias, kmap, True)
    return SparseTensor(fine.coords, feats, fine.stride, fine.parent, fine.down_map, fine._hash)


def _cat_feats(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    if a.coords.shape != b.coords.shape or np.any(a.coords != b.coords):
        raise ValueError("skip connection joins tensors with different coordinates")
    return SparseTensor(a.coords, T.concat([a.feats, b.feats], axis=1), a.stride, a.parent, a.down_map, a._hash)


def _relu(st: SparseTensor) -> SparseTensor:
    return SparseTensor(st.coords, T.relu(st.feats), st.stride, st.parent, st.down_map, st._hash)


def effective_depth(coords: np.ndarray, depth: int) -> int:
    """Largest usable depth: stop halving once every coordinate collapses to one voxel."""
    extent = int((coords.max(axis=0) - coords.min(axis=0)).max()) if len(coords) else 0
    limit = math.ceil(math.log2(extent + 1)) if extent > 0 else 0
    return min(depth, limit)


class SparseUNet(Module):
    """Submanifold stem, ``depth`` strided stages, mirrored transposed stages
    with skip concatenation.  The stem output is not passed through a
    nonlinearity, so with depth 0 the network is an affine map of each voxel's
    feature."""

    def __init__(
        self,
        in_ch: int = 6,
        stem: int = 16,
        channels: tuple[int, ...] = (16, 32, 64),
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.depth = len(channels)
        self.out_dim = stem
        self.child("stem", SparseConvLayer(in_ch, stem, "submanifold", rng))
        levels = (stem,) + tuple(channels)
        self.down, self.down_conv, self.up, self.up_conv = [], [], [], []
        for d in range(self.depth):
            self.down.append(self.child(f"down{d}", SparseConvLayer(levels[d], levels[d + 1], "strided", rng)))
            self.down_conv.append(
                self.child(f"down{d}_conv", SparseConvLayer(levels[d + 1], levels[d + 1], "submanifold", rng))
            )
        for d in range(self.depth):
            self.up.append(self.child(f"up{d}", SparseConvLayer(levels[d + 1], levels[d], "transposed", rng)))
            self.up_conv.append(
                self.child(f"up{d}_conv", SparseConvLayer(2 * levels[d], levels[d], "submanifold", rng))
            )

    def voxel_forward(self, grid: VoxelGrid, feats: Tensor | None = None) -> SparseTensor:
        """Run the network on the grid's voxels; ``feats`` replaces the
        grid's mean features (used to differentiate w.r.t. the input)."""
        if grid.num_voxels == 0:
            raise ValueError("unet_forward needs a nonempty voxel grid")
        depth = effective_depth(grid.coords, self.depth)
        if depth < self.depth:
            warnings.warn(
                f"voxel extent supports only {depth} of {self.depth} down-sampling stages",
                RuntimeWarning,
                stacklevel=3,
            )
        x = SparseTensor.from_coords(grid.coords, T.tensor(grid.features) if feats is None else feats)
        x = self.stem(x)
        skips = []
        for d in range(depth):
            skips.append(x)
            x = self.down[d](_relu(x))
            x = self.down_conv[d](_relu(x))
        for d in reversed(range(depth)):
            x = self.up[d](_relu(x))
            x = self.up_conv[d](_relu(_cat_feats(x, skips[d])))
        return x

    def __call__(self, grid: VoxelGrid, feats: Tensor | None = None) -> Tensor:
        """One feature row per input point: (N, stem)."""
        vox = self.voxel_forward(grid, feats)
        return T.take(vox.feats, grid.point_voxel)


def unet_forward(grid: VoxelGrid, net: SparseUNet) -> Tensor:
    return net(grid)


class PointwiseMLP(Module):
    """Per-point MLP on (x, y, z, r, g, b)."""

    def __init__(self, in_ch: int = 6, hidden: int = 64, out_dim: int = 64, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.out_dim = out_dim
        self.child("mlp", MLP([in_ch, hidden, out_dim], rng))

    def __call__(self, scene: Scene | np.ndarray) -> Tensor:
        pts = scene.points if isinstance(scene, Scene) else np.asarray(scene, dtype=np.float64)
        return self.mlp(T.tensor(pts))


def pointwise_mlp_forward(scene: Scene | np.ndarray, net: PointwiseMLP) -> Tensor:
    return net(scene)
