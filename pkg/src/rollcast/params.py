"""Flat parameter vectors with a named block layout.

Every trainable model stores its parameters as one float vector; the
layout records which slice belongs to which named block. Keeping a single
vector makes the gradient-descent loop, finite-difference checking, and
JSON serialization uniform across models and patches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ParamLayout:
    blocks: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        names = [name for name, _ in self.blocks]
        if len(names) != len(set(names)):
            raise ValueError("duplicate block names in layout")

    @property
    def size(self) -> int:
        return sum(int(np.prod(shape, dtype=int)) for _, shape in self.blocks)

    def slices(self) -> dict[str, slice]:
        out, offset = {}, 0
        for name, shape in self.blocks:
            span = int(np.prod(shape, dtype=int))
            out[name] = slice(offset, offset + span)
            offset += span
        return out

    def unflatten(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        """Views into the flat vector, reshaped per block (no copies)."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.size,):
            raise ValueError(f"parameter vector has length {theta.shape}, layout needs {self.size}")
        return {name: theta[sl].reshape(shape)
                for (name, shape), sl in zip(self.blocks, self.slices().values())}

    def flatten(self, blocks: dict[str, np.ndarray]) -> np.ndarray:
        theta = np.zeros(self.size)
        views = self.unflatten(theta)
        for name, value in blocks.items():
            views[name][...] = value
        return theta

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)
