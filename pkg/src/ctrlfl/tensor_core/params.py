from __future__ import annotations

import enum
import hashlib
from typing import Callable, Iterable, Iterator

import numpy as np

from .tensor import Tensor


class Partition(str, enum.Enum):
    BASE = "base"
    CONTROLLER = "controller"
    EMBEDDING = "embedding"


class ParamSet:
    """Ordered name -> Tensor mapping where every tensor carries a partition label."""

    def __init__(self) -> None:
        self._tensors: dict[str, Tensor] = {}
        self._labels: dict[str, Partition] = {}

    def add(self, name: str, tensor: Tensor, label: Partition | str) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._tensors[name] = tensor
        self._labels[name] = Partition(label)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._tensors.items()

    def label(self, name: str) -> Partition:
        return self._labels[name]

    def relabel(self, name: str, label: Partition | str) -> None:
        self._labels[name] = Partition(label)

    def select(self, predicate: Callable[[str, Partition], bool]) -> ParamSet:
        """A view sharing the same Tensor objects, restricted by `predicate`."""
        out = ParamSet()
        for name, t in self._tensors.items():
            if predicate(name, self._labels[name]):
                out.add(name, t, self._labels[name])
        return out

    def with_labels(self, *labels: Partition) -> ParamSet:
        wanted = set(labels)
        return self.select(lambda _n, lab: lab in wanted)

    def count(self) -> int:
        return count_params(self)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            t = self._tensors[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def checksums(self) -> dict[str, str]:
        return {name: tensor_sha256(t.data) for name, t in self._tensors.items()}

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None


def count_params(subset: ParamSet | dict | Iterable) -> int:
    if isinstance(subset, ParamSet):
        return sum(int(t.size) for _, t in subset.items())
    if isinstance(subset, dict):
        return sum(int(np.asarray(getattr(v, "data", v)).size) for v in subset.values())
    return sum(int(np.asarray(getattr(v, "data", v)).size) for v in subset)


def tensor_sha256(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()
