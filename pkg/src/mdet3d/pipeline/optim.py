"""Learning-rate schedule and the AdamW update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def lr_at(epoch: float, cfg) -> float:
    """Polynomial decay ``lr * (1 - epoch / epochs) ** poly_power``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr * (1.0 - epoch / cfg.epochs) ** cfg.poly_power


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"adamw.step": np.array([float(self.step)])}
        for k in self.m:
            out[f"adamw.m.{k}"] = self.m[k]
            out[f"adamw.v.{k}"] = self.v[k]
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamWState":
        st = cls(int(arrays["adamw.step"][0]))
        for key, arr in arrays.items():
            if key.startswith("adamw.m."):
                st.m[key[len("adamw.m."):]] = np.array(arr, dtype=np.float64)
            elif key.startswith("adamw.v."):
                st.v[key[len("adamw.v."):]] = np.array(arr, dtype=np.float64)
        return st


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    wd: float,
    beta1: float = BETA1,
    beta2: float = BETA2,
    eps: float = EPS,
) -> AdamWState:
    """One in-place AdamW update with decoupled weight decay.

    Parameters without a gradient entry are treated as having zero gradient
    (they still decay).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if wd:
            p.data *= 1.0 - lr * wd
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state
