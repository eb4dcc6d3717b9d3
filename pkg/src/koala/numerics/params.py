"""Named parameter storage with a frozen/learnable partition."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import ContractViolation, RejectedInput
from . import koat
from .tensor import Tensor, default_dtype

MANIFEST = "manifest.json"
TENSORS = "params.koat"


def checksum_array(arr):
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


class ParamStore:
    """Ordered mapping of stable names to leaf Tensors.

    Frozen parameters never require grad, so no gradient is even computed
    for them.
    """

    def __init__(self):
        self._params = {}
        self._frozen = set()

    def add(self, name, value, frozen=False, dtype=None):
        if name in self._params:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        dt = dtype or default_dtype()
        t = Tensor(np.array(value, dtype=dt), requires_grad=not frozen, name=name, dtype=dt)
        self._params[name] = t
        if frozen:
            self._frozen.add(name)
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix=""):
        return [n for n in self._params if n.startswith(prefix)]

    def is_frozen(self, name):
        return name in self._frozen

    def learnable_names(self):
        return [n for n in self._params if n not in self._frozen]

    def frozen_names(self):
        return [n for n in self._params if n in self._frozen]

    def learnable_items(self):
        return [(n, t) for n, t in self._params.items() if n not in self._frozen]

    def set_frozen(self, names, frozen=True):
        for n in names:
            if n not in self._params:
                raise KeyError(n)
            if frozen:
                self._frozen.add(n)
            else:
                self._frozen.discard(n)
            self._params[n].requires_grad = not frozen

    def freeze_all(self):
        self.set_frozen(list(self._params), True)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self):
        return {n: t.grad for n, t in self.learnable_items() if t.grad is not None}

    def checksum(self, name):
        return checksum_array(self._params[name].data)

    def checksums(self, names=None):
        names = list(self._params) if names is None else names
        return {n: self.checksum(n) for n in names}

    def digest(self):
        """One sha256 over every name, frozen flag and value checksum."""
        h = hashlib.sha256()
        for n in self._params:
            h.update(f"{n}|{n in self._frozen}|{self.checksum(n)}\n".encode())
        return h.hexdigest()

    def n_values(self, names=None):
        names = list(self._params) if names is None else names
        return int(sum(self._params[n].data.size for n in names))

    def astype(self, dtype):
        out = ParamStore()
        for n, t in self._params.items():
            dt = t.data.dtype if dtype is None else dtype
            out._params[n] = Tensor(t.data.astype(dt, copy=True), requires_grad=n not in self._frozen,
                                    name=n, dtype=dt)
        out._frozen = set(self._frozen)
        return out

    def copy(self):
        return self.astype(None)

    def update(self, other, frozen=None):
        """Add every parameter of ``other``; ``frozen`` overrides its tags."""
        for n, t in other.items():
            fz = other.is_frozen(n) if frozen is None else frozen
            self.add(n, t.data, frozen=fz, dtype=t.data.dtype)

    def manifest(self):
        return {
            "format": "KOAT",
            "version": koat.VERSION,
            "params": [
                {"name": n, "shape": list(t.shape),
                 "frozen": n in self._frozen,
                 "sha256": checksum_array(t.data.astype("<f4"))}
                for n, t in self._params.items()
            ],
        }

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        koat.save(d / TENSORS, [t.data for t in self._params.values()])
        (d / MANIFEST).write_text(json.dumps(self.manifest(), indent=1) + "\n")
        return d

    @classmethod
    def load(cls, directory, dtype=None):
        d = Path(directory)
        try:
            manifest = json.loads((d / MANIFEST).read_text())
            arrays = koat.load_all(d / TENSORS)
        except FileNotFoundError as exc:
            raise RejectedInput(f"checkpoint incomplete: {exc}") from exc
        entries = manifest["params"]
        if len(entries) != len(arrays):
            raise RejectedInput("manifest and tensor file disagree on parameter count")
        store = cls()
        for e, arr in zip(entries, arrays):
            if list(arr.shape) != e["shape"]:
                raise RejectedInput(f"shape mismatch for {e['name']}")
            if checksum_array(arr) != e["sha256"]:
                raise RejectedInput(f"checksum mismatch for {e['name']}")
            store.add(e["name"], arr, frozen=e["frozen"], dtype=dtype)
        return store
