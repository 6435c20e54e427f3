"""Named parameter collections and their on-disk checkpoints."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FrozenParameterError, InputError
from .numerics import Tensor, load_tensor, save_tensor

MANIFEST = "manifest.json"


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class ParamSet:
    """Ordered name -> Tensor mapping with per-parameter frozen flags."""

    def __init__(self, tensors=None):
        self._t: dict[str, Tensor] = {}
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name, value, frozen=False):
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.name = name
        t.frozen = frozen or t.frozen
        t.requires_grad = not t.frozen
        self._t[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self._t[name]

    def __contains__(self, name):
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def items(self):
        return self._t.items()

    def values(self):
        return self._t.values()

    def freeze(self):
        for t in self._t.values():
            t.frozen = True
            t.requires_grad = False
        return self

    def trainable(self):
        return [t for t in self._t.values() if not t.frozen]

    def num_values(self):
        return sum(t.data.size for t in self._t.values())

    def zero_grad(self):
        for t in self._t.values():
            t.grad = None

    def sgd_step(self, lr):
        for t in self._t.values():
            if t.grad is None:
                continue
            if t.frozen:
                raise FrozenParameterError(f"refusing to update frozen parameter {t.name!r}")
            t.data = (t.data - lr * t.grad).astype(t.data.dtype)
            t.grad = None

    def adam_step(self, state, lr, betas=(0.9, 0.999), eps=1e-8):
        """Adam update driven by ``state`` (an AdamState); used for base pretraining."""
        state.t += 1
        b1, b2 = betas
        for name, t in self._t.items():
            if t.grad is None:
                continue
            if t.frozen:
                raise FrozenParameterError(f"refusing to update frozen parameter {t.name!r}")
            g = t.grad.astype(np.float64)
            m = state.m[name] = b1 * state.m.get(name, 0.0) + (1 - b1) * g
            v = state.v[name] = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
            mhat = m / (1 - b1 ** state.t)
            vhat = v / (1 - b2 ** state.t)
            t.data = (t.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(t.data.dtype)
            t.grad = None

    def copy(self, frozen=None):
        out = ParamSet()
        for name, t in self._t.items():
            out.add(name, Tensor(t.data.copy()), frozen=t.frozen if frozen is None else frozen)
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._t):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._t[name].data).tobytes())
        return h.hexdigest()

    def save(self, directory, meta=None):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, t in self._t.items():
            fname = name + ".f32"
            save_tensor(d / fname, t.data)
            entries.append({"name": name, "shape": list(t.shape), "frozen": t.frozen, "file": fname})
        manifest = {"params": entries, "meta": meta or {}}
        (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        path = d / MANIFEST
        if not path.exists():
            raise InputError(f"no checkpoint manifest at {path}")
        manifest = json.loads(path.read_text())
        out = cls()
        for e in manifest["params"]:
            arr = load_tensor(d / e["file"])
            if list(arr.shape) != list(e["shape"]):
                raise InputError(f"{e['name']}: shape {arr.shape} disagrees with manifest {e['shape']}")
            out.add(e["name"], arr, frozen=e["frozen"])
        return out, manifest.get("meta", {})
