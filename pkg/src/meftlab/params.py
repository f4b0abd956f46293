"""Named parameter storage with frozen flags and owner tags."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .engine import Owner, Tensor


@dataclass
class ParamEntry:
    value: Tensor
    owner: Owner
    role: str  # weight | bias | gain | embedding | scalar
    group: str  # frontend | pos | layer<i> | final_ln | head | method
    frozen: bool = False

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    @property
    def size(self) -> int:
        return int(np.prod(self.value.shape, dtype=np.int64))


class ParamStore:
    """Ordered name -> ParamEntry map.

    Every entry owns a gradient accumulator of its own shape. Frozen entries
    are handed to the engine as non-trainable leaves, so backward never
    touches their accumulator.

    With ``materialize=False`` values are zero-stride placeholders: the store
    still answers shape and census questions (useful at 88M-parameter scale)
    but must not be used for math.
    """

    def __init__(self, dtype=np.float64, materialize: bool = True):
        self.dtype = np.dtype(dtype)
        self.materialize = materialize
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value, *, owner: Owner, role: str, group: str, frozen: bool = False) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        if self.materialize:
            data = np.array(value, dtype=self.dtype)
            grad = np.zeros_like(data)
        else:
            shape = tuple(value) if not hasattr(value, "shape") else value.shape
            data = np.broadcast_to(np.zeros((), dtype=self.dtype), shape)
            grad = data
        t = Tensor(data, requires_grad=not frozen, is_param=True, grad=grad, name=name)
        self._entries[name] = ParamEntry(t, Owner(owner), role, group, frozen)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def items(self):
        return self._entries.items()

    def names(self, *, group: str | None = None, prefix: str | None = None) -> list[str]:
        out = []
        for name, e in self._entries.items():
            if group is not None and e.group != group:
                continue
            if prefix is not None and not name.startswith(prefix):
                continue
            out.append(name)
        return out

    def set_frozen(self, name: str, frozen: bool) -> None:
        e = self._entries[name]
        e.frozen = frozen
        e.value.requires_grad = not frozen

    def freeze_all(self) -> None:
        for name in self._entries:
            self.set_frozen(name, True)

    def zero_grad(self) -> None:
        if not self.materialize:
            return
        for e in self._entries.values():
            e.value.grad[...] = 0

    def trainable_names(self) -> list[str]:
        return [n for n, e in self._entries.items() if not e.frozen]

    def count(self, *, trainable_only: bool = False) -> int:
        return sum(e.size for e in self._entries.values() if not (trainable_only and e.frozen))

    def trainable_ratio(self) -> float:
        """Trainable share of all parameters, in percent."""
        return 100.0 * self.count(trainable_only=True) / self.count()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: e.value.data.copy() for n, e in self._entries.items()}
