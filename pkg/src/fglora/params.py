"""Named parameter storage with freeze flags and content hashes."""

from __future__ import annotations

import hashlib
from typing import Iterable, Iterator

import numpy as np

from .tensor_core.tensor import Tensor


class FrozenParameterError(RuntimeError):
    """A frozen parameter was about to be modified or received a gradient."""


def content_hash(arr: np.ndarray) -> str:
    """64-bit blake2b digest (hex) of the shape and little-endian float64 bytes."""
    a = np.asarray(arr, dtype="<f8", order="C")
    h = hashlib.blake2b(digest_size=8)
    h.update(repr(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


class ParamStore:
    """Ordered map ``name -> Tensor`` iterated in lexicographic name order.

    A parameter is trainable iff its tensor has ``requires_grad`` set; freezing a
    parameter clears the flag so no gradient can ever be recorded for it.
    """

    def __init__(self, params: dict[str, np.ndarray] | None = None, metadata: dict[str, str] | None = None):
        self._params: dict[str, Tensor] = {}
        self.metadata: dict[str, str] = dict(metadata or {})
        for name, arr in (params or {}).items():
            self.add(name, arr)

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def is_frozen(self, name: str) -> bool:
        return not self._params[name].requires_grad

    def trainable_names(self) -> list[str]:
        return [n for n, t in self.items() if t.requires_grad]

    def frozen_names(self) -> list[str]:
        return [n for n, t in self.items() if not t.requires_grad]

    def num_params(self, names: Iterable[str] | None = None) -> int:
        names = self.names() if names is None else names
        return int(sum(self._params[n].size for n in names))

    def hash(self, name: str) -> str:
        return content_hash(self._params[name].data)

    def hashes(self) -> dict[str, str]:
        return {n: content_hash(t.data) for n, t in self.items()}

    def digest(self) -> str:
        """Single digest over every (name, content hash) pair."""
        h = hashlib.blake2b(digest_size=8)
        for n, hx in self.hashes().items():
            h.update(n.encode() + b"\0" + hx.encode())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data) if t.requires_grad else None

    def freeze_all(self) -> None:
        for t in self._params.values():
            t.requires_grad = False
            t.grad = None

    def set_trainable(self, name_prefixes: Iterable[str]) -> list[str]:
        """Make exactly the parameters under ``name_prefixes`` trainable."""
        prefixes = list(name_prefixes)
        resolved = []
        for p in prefixes:
            hits = [n for n in self.names() if n.startswith(p)]
            if not hits:
                raise KeyError(f"prefix {p!r} matches no parameter")
            resolved.extend(hits)
        chosen = set(resolved)
        for n, t in self._params.items():
            t.requires_grad = n in chosen
            t.grad = None
        return sorted(chosen)

    def set_array(self, name: str, arr: np.ndarray, *, allow_frozen: bool = False) -> None:
        t = self._params[name]
        if not t.requires_grad and not allow_frozen:
            raise FrozenParameterError(f"refusing to overwrite frozen parameter {name!r}")
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != t.shape:
            raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {t.shape}")
        t.data = arr.copy()

    def copy(self) -> "ParamStore":
        out = ParamStore(metadata=self.metadata)
        for n, t in self.items():
            out.add(n, t.data, trainable=t.requires_grad)
        return out

    def subset(self, prefixes: Iterable[str]) -> "ParamStore":
        prefixes = tuple(prefixes)
        out = ParamStore(metadata=self.metadata)
        for n, t in self.items():
            if n.startswith(prefixes):
                out.add(n, t.data, trainable=t.requires_grad)
        return out

    def update(self, other: "ParamStore") -> None:
        """Adopt ``other``'s tensors (shared, not copied) under their names."""
        for n, t in other.items():
            if n in self._params:
                raise KeyError(f"duplicate parameter name {n!r}")
            self._params[n] = t

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.items()}

    def __repr__(self) -> str:
        return f"ParamStore({len(self)} tensors, {self.num_params()} values, {len(self.trainable_names())} trainable)"
