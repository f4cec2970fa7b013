"""OSPA distance between finite point sets, with exact optimal assignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = ["OspaParams", "OspaResult", "optimal_assignment", "ospa"]


@dataclass(frozen=True)
class OspaParams:
    """Cutoff (same units as the points) and order of the metric."""

    cutoff: float = 100.0
    order: float = 1.0

    def __post_init__(self):
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if self.order < 1:
            raise ValueError("order must be >= 1")


class OspaResult(NamedTuple):
    total: float
    localization: float
    cardinality: float


def optimal_assignment(cost: np.ndarray) -> Tuple[List[Tuple[int, int]], float]:
    """Exact minimum-cost assignment on a rectangular nonnegative matrix.

    Returns the matched (row, col) pairs (one per row or column, whichever is
    fewer) and the total cost. An empty matrix costs 0.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return [], 0.0
    if np.any(cost < 0):
        raise ValueError("costs must be nonnegative")
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist())), float(cost[rows, cols].sum())


def ospa(x: np.ndarray, y: np.ndarray, params: OspaParams = OspaParams()) -> OspaResult:
    """OSPA distance between the point sets `x` and `y`.

    Pairwise Euclidean distances are clipped at the cutoff, the smaller set is
    optimally assigned into the larger, unmatched points pay the full cutoff,
    and the p-th powers are averaged over the larger cardinality. Both sets
    empty gives 0.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 2) if np.size(x) else np.empty((0, 2))
    y = np.asarray(y, dtype=float).reshape(-1, 2) if np.size(y) else np.empty((0, 2))
    n, m = len(x), len(y)
    if n == 0 and m == 0:
        return OspaResult(0.0, 0.0, 0.0)
    c, p = params.cutoff, params.order
    big = max(n, m)
    if n == 0 or m == 0:
        return OspaResult(c, 0.0, c)

    dists = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=-1)
    clipped = np.minimum(dists, c)
    _, loc_cost = optimal_assignment(clipped ** p)
    card_cost = (c ** p) * (big - min(n, m))
    total = ((loc_cost + card_cost) / big) ** (1.0 / p)
    return OspaResult(total,
                      (loc_cost / big) ** (1.0 / p),
                      (card_cost / big) ** (1.0 / p))
