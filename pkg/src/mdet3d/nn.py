"""Parameter containers, small layers and the checkpoint file format."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_FORMAT = "mdet3d-checkpoint"
CHECKPOINT_VERSION = 1


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal parameter tree.  Attributes registered through :meth:`param` and
    :meth:`child` are walked in registration order, which fixes parameter
    naming and therefore checkpoint layout."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        setattr(self, name, t)
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        setattr(self, name, module)
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._children.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching arrays in; returns names that were skipped."""
        skipped = []
        own = dict(self.named_parameters())
        for name, p in own.items():
            arr = state.get(name)
            if arr is None or tuple(np.shape(arr)) != p.shape:
                if strict:
                    got = None if arr is None else np.shape(arr)
                    raise KeyError(f"parameter {name!r}: expected shape {p.shape}, got {got}")
                skipped.append(name)
                continue
            p.data[...] = arr
        if strict:
            extra = sorted(set(state) - set(own))
            if extra:
                raise KeyError(f"unexpected parameters in state: {extra}")
        return skipped

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.param("weight", uniform_init(rng, (in_dim, out_dim), in_dim))
        self.has_bias = bias
        if bias:
            self.param("bias", uniform_init(rng, (out_dim,), in_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight, self.bias if self.has_bias else None)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.param("gamma", np.ones(dim))
        self.param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x) * self.gamma + self.beta


class MLP(Module):
    """Stack of Linear layers with ReLU between them (not after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        super().__init__()
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.layers.append(self.child(f"fc{i}", Linear(a, b, rng)))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


# ------------------------------------------------------------------ checkpoints


def dumps_checkpoint(state: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Serialise parameters as canonical JSON.

    Floats go through ``repr`` so values round-trip exactly, and keys are
    sorted, so equal states always produce identical bytes.
    """
    params = {
        name: {"shape": list(np.shape(arr)), "data": [float(v) for v in np.ravel(arr)]}
        for name, arr in state.items()
    }
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": params,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def loads_checkpoint(text: str) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint file (format={doc.get('format')!r})")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    state = {}
    for name, rec in doc["params"].items():
        shape = tuple(rec["shape"])
        data = np.asarray(rec["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise ValueError(f"parameter {name!r}: {data.size} values for shape {shape}")
        state[name] = data.reshape(shape)
    return state, doc.get("meta", {})


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_text(dumps_checkpoint(state, meta), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads_checkpoint(Path(path).read_text(encoding="utf-8"))
