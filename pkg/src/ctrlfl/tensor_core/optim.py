from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Collection

import numpy as np

from ..errors import ContractError
from .params import ParamSet, Partition

TrainMask = Callable[[str, Partition], bool]


@dataclass
class AdamState:
    # beta2/epsilon follow the original Transformer recipe; lr is a fixed desk-scale constant.
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> AdamState:
        return AdamState(
            self.learning_rate, self.beta1, self.beta2, self.epsilon, self.step_count,
            {k: v.copy() for k, v in self.first_moment.items()},
            {k: v.copy() for k, v in self.second_moment.items()},
        )


def _as_mask(train_mask) -> TrainMask:
    if train_mask is None:
        return lambda _n, _l: True
    if callable(train_mask):
        return train_mask
    names = frozenset(train_mask)
    return lambda n, _l: n in names


def adam_step(params: ParamSet, state: AdamState,
              train_mask: TrainMask | Collection[str] | None = None) -> None:
    """One bias-corrected Adam update on the tensors selected by `train_mask`.

    Unselected tensors are not touched at all (their arrays keep identity).
    """
    mask = _as_mask(train_mask)
    chosen = [(n, t) for n, t in params.items() if mask(n, params.label(n))]
    for name, t in chosen:
        if t.grad is None:
            raise ContractError(f"trainable tensor {name!r} has no gradient")
    state.step_count += 1
    step = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** step
    corr2 = 1.0 - b2 ** step
    for name, t in chosen:
        g = t.grad
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        t.data = t.data - state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
