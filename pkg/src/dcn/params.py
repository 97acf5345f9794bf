"""Parameter containers shared by the network modules."""

from __future__ import annotations

import dataclasses

import numpy as np

from .tensor import Tensor


def kaiming(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class ParamGroup:
    """Mixin for dataclasses whose fields are tensors or nested groups."""

    def named(self, prefix: str = "") -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(v, ParamGroup):
                out.update(v.named(name + "."))
            elif isinstance(v, Tensor):
                out[name] = v
        return out

    def tensors(self) -> list:
        return list(self.named().values())

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def load_arrays(self, arrays: dict, prefix: str = "") -> None:
        for name, t in self.named(prefix).items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)
