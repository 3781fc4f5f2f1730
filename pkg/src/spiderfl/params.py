"""Named parameter collections (global supernet weights and local child weights)."""

from __future__ import annotations

import hashlib
from collections.abc import Mapping
from typing import Iterable, Iterator

import numpy as np

from .autodiff import Tensor
from .errors import UsageError


class ParamStore(Mapping):
    """Ordered mapping ``name -> Tensor`` whose tensors are gradient leaves.

    Stores are treated as values: updates go through :meth:`replace`, which
    returns a new store and leaves the original untouched.
    """

    def __init__(self, tensors: Mapping[str, Tensor], spec=None):
        self._tensors = dict(tensors)
        self.spec = spec

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], spec=None) -> "ParamStore":
        return cls({k: Tensor(np.array(v, copy=True), requires_grad=True) for k, v in arrays.items()}, spec)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"ParamStore({len(self)} tensors, {self.num_scalars()} scalars)"

    def names(self) -> list[str]:
        return list(self._tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    def num_scalars(self) -> int:
        return int(sum(t.data.size for t in self._tensors.values()))

    def replace(self, arrays: Mapping[str, np.ndarray]) -> "ParamStore":
        """New store with the same names; values taken from ``arrays``."""
        if set(arrays) != set(self._tensors):
            raise UsageError("replace() needs exactly the store's names")
        return ParamStore({k: Tensor(arrays[k], requires_grad=True) for k in self._tensors}, self.spec)

    def copy(self) -> "ParamStore":
        return ParamStore.from_arrays(self.arrays(), self.spec)

    def restrict(self, names: Iterable[str]) -> "ParamStore":
        keep = set(names)
        missing = keep - set(self._tensors)
        if missing:
            raise UsageError(f"names not in store: {sorted(missing)[:5]}")
        return ParamStore({k: t for k, t in self._tensors.items() if k in keep}, self.spec)

    def grads_by_name(self, leaf_grads: Mapping[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
        """Translate a :func:`backward` result into name-keyed gradients; unreached names get zeros."""
        out = {}
        for name, t in self._tensors.items():
            g = leaf_grads.get(t)
            out[name] = np.zeros_like(t.data) if g is None else g
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self._tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def allclose(self, other: "ParamStore", atol: float = 0.0) -> bool:
        if self.names() != other.names():
            return False
        if atol == 0.0:
            return all(np.array_equal(self[k].data, other[k].data) for k in self)
        return all(np.allclose(self[k].data, other[k].data, rtol=0, atol=atol) for k in self)
