"""Adam with per-group learning rates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def optimizer_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``param`` and ``state``."""
    if param.shape != grad.shape:
        raise ValueError(f"param {param.shape} and grad {grad.shape} differ")
    state.t += 1
    state.m *= BETA1
    state.m += (1.0 - BETA1) * grad
    state.v *= BETA2
    state.v += (1.0 - BETA2) * grad * grad
    m_hat = state.m / (1.0 - BETA1 ** state.t)
    v_hat = state.v / (1.0 - BETA2 ** state.t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + EPS)).astype(param.dtype, copy=False)


@dataclass
class Adam:
    """Adam over groups of (tensors, learning rate)."""

    groups: list[tuple[list[Tensor], float]]
    states: list[list[AdamState]] = field(default_factory=list)

    def __post_init__(self):
        if not self.states:
            self.states = [
                [AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in params]
                for params, _ in self.groups
            ]

    def parameters(self) -> list[Tensor]:
        return [p for params, _ in self.groups for p in params]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def step(self) -> None:
        for (params, lr), states in zip(self.groups, self.states):
            for p, st in zip(params, states):
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                optimizer_step(p.data, g, st, lr)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for gi, states in enumerate(self.states):
            for pi, st in enumerate(states):
                out[f"m_{gi}_{pi}"] = st.m
                out[f"v_{gi}_{pi}"] = st.v
                out[f"t_{gi}_{pi}"] = np.array(st.t)
        return out

    def load_state_arrays(self, arrays) -> None:
        for gi, states in enumerate(self.states):
            for pi, st in enumerate(states):
                st.m = np.array(arrays[f"m_{gi}_{pi}"])
                st.v = np.array(arrays[f"v_{gi}_{pi}"])
                st.t = int(arrays[f"t_{gi}_{pi}"])
