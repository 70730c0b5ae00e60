"""Named parameter collections.

Model parameter records are dataclasses whose Tensor fields are the trainable
leaves. This base class gives them copying, flattening and array round-trips
so that optimizers, checkpoints and gradient checks can treat every model the
same way.
"""

from __future__ import annotations

import dataclasses
import hashlib

import numpy as np

from .tensor import NonFiniteError, Tensor


class Params:
    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if isinstance(getattr(self, f.name), Tensor)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors().items()}

    def copy(self):
        fresh = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors().items()}
        return dataclasses.replace(self, **fresh)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], **extra):
        tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
                   for k, v in arrays.items()}
        return cls(**tensors, **extra)

    def apply_update(self, grads, step: float):
        """Return a copy moved by ``step * grad`` (ascent for positive step)."""
        new = {}
        for k, t in self.tensors().items():
            g = grads.of(t) if hasattr(grads, "of") else grads.get(t, np.zeros_like(t.data))
            data = t.data + step * g
            if not np.all(np.isfinite(data)):
                raise NonFiniteError(f"parameter {k} became non-finite")
            new[k] = Tensor(data, requires_grad=True)
        return dataclasses.replace(self, **new)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in sorted(self.tensors().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors().values())
