"""Named parameter registry shared by the backbone, side network and heads."""

from __future__ import annotations

import hashlib
from typing import Iterator, Mapping

import numpy as np

from .autograd import BatchNormState, Parameter
from .checkpoint import CheckpointMismatchError


class ParamStore(dict):
    """``name -> Parameter``. Buffers (batch-norm statistics) are non-trainable entries."""

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Parameter:
        if name in self:
            raise KeyError(f"duplicate parameter name {name}")
        p = Parameter(data, requires_grad=trainable, dtype=data.dtype, name=name)
        self[name] = p
        return p

    def add_batchnorm(self, prefix: str, channels: int, dtype, trainable: bool = True) -> None:
        self.add(f"{prefix}.weight", np.ones(channels, dtype=dtype), trainable)
        self.add(f"{prefix}.bias", np.zeros(channels, dtype=dtype), trainable)
        self.add(f"{prefix}.running_mean", np.zeros(channels, dtype=dtype), trainable=False)
        self.add(f"{prefix}.running_var", np.ones(channels, dtype=dtype), trainable=False)

    def bn_state(self, prefix: str) -> BatchNormState:
        return BatchNormState(self[f"{prefix}.running_mean"].data, self[f"{prefix}.running_var"].data)

    def trainable(self) -> Iterator[Parameter]:
        return (p for _, p in sorted(self.items()) if p.requires_grad)

    def subset(self, prefix: str) -> "ParamStore":
        out = ParamStore()
        out.update({k: v for k, v in self.items() if k.startswith(prefix)})
        return out

    def freeze(self, prefix: str = "") -> None:
        for k, p in self.items():
            if k.startswith(prefix):
                p.requires_grad = False

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def nbytes(self, trainable_only: bool = False) -> int:
        return sum(p.data.nbytes for p in self.values() if p.requires_grad or not trainable_only)

    def count(self, trainable_only: bool = False) -> int:
        return sum(p.data.size for p in self.values() if p.requires_grad or not trainable_only)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into existing buffers (in place, so bound BN states stay valid)."""
        missing = set(self) - set(state)
        unexpected = set(state) - set(self)
        shapes = [(k, tuple(state[k].shape), self[k].shape) for k in set(self) & set(state) if tuple(state[k].shape) != self[k].shape]
        if shapes or (strict and (missing or unexpected)):
            raise CheckpointMismatchError(missing if strict else (), unexpected if strict else (), shapes)
        for k in set(self) & set(state):
            self[k].data[...] = state[k]

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for k in sorted(self):
            if k.startswith(prefix):
                h.update(k.encode())
                h.update(self[k].data.tobytes())
        return h.hexdigest()


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)
