"""Geographic adjacency and the row-stochastic mixing operator."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .validation import check_nonnegative, check_square, freeze

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class AdjacencyMatrix:
    """Directed nonnegative adjacency; entry (i, j) is the relation from
    region j to region i."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        check_square(w, "adjacency")
        check_nonnegative(w, "adjacency")
        object.__setattr__(self, "weights", freeze(w))


@dataclass(frozen=True)
class MixingOperator:
    """Row-stochastic operator; applying it takes convex combinations of
    neighbor values, so it can never expand the value range."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        check_square(m, "mixing operator")
        check_nonnegative(m, "mixing operator")
        if np.max(np.abs(m.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ValueError("mixing operator rows must sum to 1")
        object.__setattr__(self, "matrix", freeze(m))


def load_adjacency(path: str | Path, regions: tuple[str, ...]) -> AdjacencyMatrix:
    """Read an edge-list ``src,dst,weight`` CSV into a dense matrix.

    An edge src -> dst lands in entry (dst, src), so row i collects region
    i's inflows. Unlisted pairs are zero; edges are directed and symmetric
    duplication is not implied.
    """
    index = {r: i for i, r in enumerate(regions)}
    n = len(regions)
    weights = np.zeros((n, n))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["src", "dst", "weight"]:
            raise ValueError(f"{path}: expected header 'src,dst,weight'")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns")
            src, dst = row[0].strip(), row[1].strip()
            for name in (src, dst):
                if name not in index:
                    raise ValueError(f"{path}:{lineno}: unknown region {name!r}")
            try:
                w = float(row[2])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric weight {row[2]!r}") from exc
            if not np.isfinite(w) or w < 0:
                raise ValueError(f"{path}:{lineno}: weight must be finite and nonnegative")
            weights[index[dst], index[src]] = w
    return AdjacencyMatrix(weights)


def row_normalize(adjacency: AdjacencyMatrix | np.ndarray) -> MixingOperator:
    """Divide each row by its sum; all-zero rows become self-loops.

    The self-loop policy keeps the operator exactly stochastic, which the
    compartmental rollout's conservation property relies on. Idempotent on
    matrices that are already row-stochastic.
    """
    weights = adjacency.weights if isinstance(adjacency, AdjacencyMatrix) else np.asarray(adjacency, dtype=np.float64)
    check_square(weights, "adjacency")
    check_nonnegative(weights, "adjacency")
    sums = weights.sum(axis=1)
    matrix = np.where(sums[:, None] > 0, weights / np.where(sums == 0, 1.0, sums)[:, None], 0.0)
    for i in np.nonzero(sums == 0)[0]:
        matrix[i, i] = 1.0
    return MixingOperator(matrix)


def mix(operator: MixingOperator, values: np.ndarray) -> np.ndarray:
    """Apply the operator to a length-n vector."""
    matrix = operator.matrix
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (matrix.shape[0],):
        raise ValueError(f"vector length {v.shape} does not match operator size {matrix.shape[0]}")
    return matrix @ v


def identity_mixing(n: int) -> MixingOperator:
    return MixingOperator(np.eye(n))
