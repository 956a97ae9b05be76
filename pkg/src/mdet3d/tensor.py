"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad=True`` appends a
node to the thread's current :class:`Tape`.  Nodes are appended in execution
order, so the tape is already a topological order of the graph and
:func:`backward` only has to walk it in reverse once.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> backward((x * x).sum())[x]
    array([6.])
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GradCheckReport",
    "tensor",
    "as_tensor",
    "current_tape",
    "no_grad",
    "backward",
    "grad_check",
    "grad_check_params",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "affine",
    "relu",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "softmax",
    "layer_norm",
    "cross_entropy",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "take",
    "segment_sum",
    "segment_mean",
    "maximum",
    "minimum",
    "amax",
    "amin",
    "where",
    "custom_op",
]

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " and ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Node:
    __slots__ = ("out", "parents", "backward_fn", "op", "tape")

    def __init__(self, out, parents, backward_fn, op, tape):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.tape = tape


class Tape:
    """Ordered record of executed operations.

    Use as a context manager to route recording to a private tape; otherwise
    each thread records onto its own default tape.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._position: dict[int, int] = {}

    def record(self, node: Node) -> None:
        self._position[id(node)] = len(self.nodes)
        self.nodes.append(node)

    def position(self, node: Node) -> int | None:
        return self._position.get(id(node))

    def reset(self) -> None:
        self.nodes.clear()
        self._position.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Tape()]
        _local.grad_enabled = True
    return stack


def current_tape() -> Tape:
    return _stack()[-1]


def _grad_enabled() -> bool:
    _stack()
    return _local.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (inference)."""
    _stack()
    prev = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """An n-d float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return _getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(out: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    if type(out) is not np.ndarray:
        out = np.asarray(out, dtype=np.float64)
    res = Tensor._wrap(out)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        res.requires_grad = True
        tape = current_tape()
        node = Node(res, parents, backward_fn, op, tape)
        res._node = node
        tape.record(node)
    return res


def custom_op(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Register a primitive defined outside this module.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.
    """
    return _make(np.asarray(out, dtype=np.float64), tuple(parents), backward_fn, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("maximum", a, b)
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _make(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
        "maximum",
    )


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("minimum", a, b)
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _make(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
        "minimum",
    )


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb)),
        "where",
    )


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean", a.shape, detail="empty reduction")
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), (a,), bw, "mean")


def _extreme(a, axis, keepdims, fn, argfn, op):
    a = as_tensor(a)
    ax = axis % a.ndim
    idx = argfn(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(idx, ax), g, axis=ax)
        return (full,)

    if not keepdims:
        out = np.squeeze(out, axis=ax)
    return _make(out, (a,), bw, op)


def amax(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximiser."""
    return _extreme(a, axis, keepdims, np.max, np.argmax, "amax")


def amin(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Min along one axis; the gradient goes to the first minimiser."""
    return _extreme(a, axis, keepdims, np.min, np.argmin, "amin")


# ------------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim < 1 or weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("affine", x.shape, weight.shape)
    xd, wd = x.data, weight.data
    out = xd @ wd
    parents: tuple = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[1],):
            raise ShapeError("affine", weight.shape, bias.shape, detail="bias")
        out = out + bias.data
        parents = (x, weight, bias)

    def bw(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _make(out, parents, bw, "affine")


# ------------------------------------------------------------------ normalisation


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError("softmax", a.shape, detail="empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(
        out,
        (a,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
        "softmax",
    )


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("layer_norm", a.shape, detail="empty axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), bw, "layer_norm")


def cross_entropy(logits, target, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``target`` under softmax(logits).

    ``logits`` is (M, K); ``weights`` optionally re-weights rows, in which
    case the result is the weighted mean.
    """
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != target.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, target.shape)
    m, k = logits.shape
    if m == 0:
        raise ShapeError("cross_entropy", logits.shape, detail="no rows")
    if np.any(target < 0) or np.any(target >= k):
        raise ValueError(f"cross_entropy: target index out of range [0, {k})")
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=np.float64).reshape(m)
    total = w.sum()
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(m)
    nll = lse - z[rows, target]
    out = np.asarray((w * nll).sum() / total)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, target] -= 1.0
        return (g * p * (w / total)[:, None],)

    return _make(out, (logits,), bw, "cross_entropy")


# ------------------------------------------------------------------ shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", orig, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = tuple(as_tensor(t) for t in items)
    try:
        out = np.concatenate([t.data for t in items], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in items]) from None
    splits = np.cumsum([t.shape[axis] for t in items])[:-1]
    return _make(out, items, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(items: Sequence, axis: int = 0) -> Tensor:
    items = tuple(as_tensor(t) for t in items)
    try:
        out = np.stack([t.data for t in items], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in items]) from None
    n = len(items)
    return _make(
        out,
        items,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


def _getitem(a: Tensor, key) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.asarray(a.data[key]), (a,), bw, "getitem")


def take(a, index) -> Tensor:
    """Gather rows ``a[index]`` (first axis)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw, "take")


def segment_sum(a, segment, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given per-row ``segment`` ids."""
    a = as_tensor(a)
    segment = np.asarray(segment, dtype=np.int64)
    if segment.shape != (a.shape[0],):
        raise ShapeError("segment_sum", a.shape, segment.shape)
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, segment, a.data)
    return _make(out, (a,), lambda g: (g[segment],), "segment_sum")


def segment_mean(a, segment, num_segments: int) -> Tensor:
    """Average rows of ``a`` over each index set ``{i : segment[i] == m}``."""
    a = as_tensor(a)
    segment = np.asarray(segment, dtype=np.int64)
    if segment.shape != (a.shape[0],):
        raise ShapeError("segment_mean", a.shape, segment.shape)
    counts = np.bincount(segment, minlength=num_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("segment_mean: empty segment")
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, segment, a.data)
    scale = (1.0 / counts).reshape((-1,) + (1,) * (a.ndim - 1))
    out *= scale
    return _make(out, (a,), lambda g: ((g * scale)[segment],), "segment_mean")


# ------------------------------------------------------------------ backward


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Back-propagate from scalar ``loss``; returns this pass's leaf gradients.

    Leaf ``.grad`` fields accumulate.  The tape is reset afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise ValueError("backward: loss is not recorded on any tape")
    tape = tape or node.tape
    start = tape.position(node)
    if start is None or tape.nodes[start] is not node:
        raise ValueError("backward: loss node is not on the tape (already consumed?)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    nodes = tape.nodes
    for i in range(start, -1, -1):
        n = nodes[i]
        g = grads.pop(id(n.out), None)
        if g is None:
            continue
        pgrads = n.backward_fn(g)
        for parent, pg in zip(n.parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if parent._node is None:
                if key in leaves:
                    leaves[key] = (parent, leaves[key][1] + pg)
                else:
                    leaves[key] = (parent, np.asarray(pg, dtype=np.float64))
            elif key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    tape.reset()

    result: dict[Tensor, np.ndarray] = {}
    for leaf, g in leaves.values():
        g = np.asarray(g).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ------------------------------------------------------------------ gradient checks


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float
    max_rel_error: float = field(init=False)
    passed: bool = field(init=False)

    def __post_init__(self):
        self.max_rel_error = float(self.rel_error.max()) if self.rel_error.size else 0.0
        self.passed = self.max_rel_error < self.tol


def _rel_error(a: np.ndarray, n: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``point`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not step > 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    with Tape():
        x = Tensor(x0, requires_grad=True)
        y = f(x)
        if y.size != 1 or not np.all(np.isfinite(y.data)):
            raise ValueError("grad_check: f must be finite and scalar-valued")
        analytic = backward(y).get(x, np.zeros_like(x0))
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xp[i] += step
            fp = f(Tensor._wrap(xp.reshape(x0.shape))).item()
            xp[i] -= 2 * step
            fm = f(Tensor._wrap(xp.reshape(x0.shape))).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("grad_check: f is not finite at perturbed point")
            flat[i] = (fp - fm) / (2 * step)
    return GradCheckReport(analytic, numeric, _rel_error(analytic, numeric, floor), tol)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Gradient check of a closure w.r.t. parameter tensors mutated in place.

    With ``max_coords`` set, a random subset of coordinates is checked.
    """
    if not step > 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    params = list(params)
    with Tape():
        for p in params:
            p.grad = None
        y = loss_fn()
        if y.size != 1 or not np.all(np.isfinite(y.data)):
            raise ValueError("grad_check: loss must be finite and scalar-valued")
        g = backward(y)
    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]
    analytic = np.empty(len(coords))
    numeric = np.empty(len(coords))
    with no_grad():
        for c, (pi, j) in enumerate(coords):
            p = params[pi]
            flat = p.data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + step
            fp = loss_fn().item()
            flat[j] = orig - step
            fm = loss_fn().item()
            flat[j] = orig
            numeric[c] = (fp - fm) / (2 * step)
            analytic[c] = g[p].reshape(-1)[j] if p in g else 0.0
    return GradCheckReport(analytic, numeric, _rel_error(analytic, numeric, floor), tol)
