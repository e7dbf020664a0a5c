"""Named, ordered parameter collections.

A ParameterVector is the unit the optimizers and the adaptation step operate
on: a fixed set of named tensors that can be combined entrywise.  Entrywise
arithmetic goes through the tensor primitives, so an updated vector such as
``theta + (-alpha) * g`` stays differentiable when its operands are tracked.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParameterVector:
    __slots__ = ("_entries",)

    def __init__(self, entries):
        if isinstance(entries, dict):
            items = entries.items()
        else:
            items = entries
        self._entries: dict[str, Tensor] = {}
        for name, t in items:
            if name in self._entries:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._entries[name] = t if isinstance(t, Tensor) else T.tensor(t)

    def names(self) -> list[str]:
        return list(self._entries)

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def total_size(self) -> int:
        return sum(t.size for t in self._entries.values())

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}:{t.shape}" for n, t in self._entries.items())
        return f"ParameterVector({inner})"

    # -- structure -----------------------------------------------------------

    def _check_same_structure(self, other: "ParameterVector") -> None:
        if self.names() != other.names():
            raise ValueError("parameter vectors have different name sets")
        for n in self._entries:
            if self._entries[n].shape != other._entries[n].shape:
                raise ValueError(f"shape mismatch for {n!r}: "
                                 f"{self._entries[n].shape} vs {other._entries[n].shape}")

    def replace_tensors(self, tensors: Iterable[Tensor]) -> "ParameterVector":
        tensors = list(tensors)
        if len(tensors) != len(self._entries):
            raise ValueError("replace_tensors: length mismatch")
        return ParameterVector(zip(self._entries.keys(), tensors))

    def map(self, fn: Callable[[Tensor], Tensor]) -> "ParameterVector":
        return ParameterVector((n, fn(t)) for n, t in self._entries.items())

    def zip_with(self, other: "ParameterVector",
                 fn: Callable[[Tensor, Tensor], Tensor]) -> "ParameterVector":
        self._check_same_structure(other)
        return ParameterVector((n, fn(t, other._entries[n])) for n, t in self._entries.items())

    # -- arithmetic (graph-building) ------------------------------------------

    def __add__(self, other: "ParameterVector") -> "ParameterVector":
        return self.zip_with(other, T.add)

    def __sub__(self, other: "ParameterVector") -> "ParameterVector":
        return self.zip_with(other, T.sub)

    def scale(self, c: float) -> "ParameterVector":
        return self.map(lambda t: T.mul(t, float(c)))

    def detach(self) -> "ParameterVector":
        return self.map(lambda t: t.detach())

    def as_parameters(self) -> "ParameterVector":
        """Fresh tracked leaves with the same values (drops any graph)."""
        return self.map(lambda t: T.parameter(t.data.copy()))

    def zeros_like(self) -> "ParameterVector":
        return self.map(lambda t: T.tensor(np.zeros_like(t.data)))

    # -- flat view -------------------------------------------------------------

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([t.data.ravel() for t in self._entries.values()])

    def unflatten(self, vec: np.ndarray) -> "ParameterVector":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.total_size:
            raise ValueError(f"unflatten: expected {self.total_size} values, got {vec.size}")
        out = []
        off = 0
        for n, t in self._entries.items():
            k = t.size
            out.append((n, Tensor(vec[off:off + k].reshape(t.shape).copy(),
                                  grad_tracked=t.grad_tracked)))
            off += k
        return ParameterVector(out)


def merge(prefixed: dict[str, ParameterVector]) -> ParameterVector:
    """Join several vectors under name prefixes ('theta', 'psi', ...)."""
    out = []
    for prefix, pv in prefixed.items():
        for n, t in pv.items():
            out.append((f"{prefix}.{n}", t))
    return ParameterVector(out)


def split(pv: ParameterVector, prefixes: list[str]) -> dict[str, ParameterVector]:
    """Inverse of merge for the given prefixes."""
    buckets: dict[str, list[tuple[str, Tensor]]] = {p: [] for p in prefixes}
    for name, t in pv.items():
        head, _, rest = name.partition(".")
        if head not in buckets:
            raise ValueError(f"unexpected prefix in {name!r}")
        buckets[head].append((rest, t))
    return {p: ParameterVector(entries) for p, entries in buckets.items()}
