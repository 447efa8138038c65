"""Parameter containers and the global float precision switch."""

import os
from collections import OrderedDict

import numpy as np

# 64-bit mode is only meant for tighter gradient checks.
FLOAT = np.float64 if os.environ.get("PLATED_FLOAT64") == "1" else np.float32


def as_float(x):
    return np.asarray(x, dtype=FLOAT)


class Param:
    """A learnable array with its gradient buffer.

    ``l2`` is the per-parameter L2 coefficient folded into the gradient by the
    optimizer. Frozen parameters keep a gradient buffer but are skipped by
    every update.
    """

    def __init__(self, value, trainable=True, l2=0.0):
        self.value = as_float(value).copy()
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.l2 = float(l2)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Param(shape={self.value.shape}{flag})"


class ParamStore(OrderedDict):
    """Ordered ``name -> Param`` mapping with a few whole-store helpers."""

    def zero_grad(self):
        for p in self.values():
            p.zero_grad()

    def trainable(self):
        return ParamStore((k, p) for k, p in self.items() if p.trainable)

    def count(self, trainable_only=False):
        return sum(p.value.size for p in self.values() if p.trainable or not trainable_only)

    def snapshot(self):
        return {k: p.value.copy() for k, p in self.items()}

    def load(self, arrays):
        for k, p in self.items():
            if k not in arrays:
                raise KeyError(f"missing array for parameter {k!r}")
            a = np.asarray(arrays[k])
            if a.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {k!r}: {a.shape} vs {p.value.shape}")
            p.value[...] = a
