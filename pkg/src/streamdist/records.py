"""Per-iteration run records and the checkpoint grid.

The record schema is owned by the harness; algorithm runners emit these and
the harness aggregates them across trials.  ``node`` is an aggregation
marker: "agg" for the across-node mean of a metric, "worst" for the worst
node, and plain "node" for single-machine runs.
"""

from __future__ import annotations

from dataclasses import dataclass

_DENSE_LIMIT = 1000
_THIN_FACTOR = 1.2


@dataclass(frozen=True)
class RunRecord:
    trial: int
    algorithm: str
    node: str
    iteration: int          # t
    samples: int            # t', arrived samples including discarded ones
    sim_seconds: float
    discarded_total: int    # t * mu
    metrics: tuple[tuple[str, float], ...]


def checkpoint_grid(total_iterations: int) -> list[int]:
    """Iterations at which metrics are recorded.

    Every iteration up to 1000, then powers of 1.2 rounded to integers,
    deduplicated, and always including the final iteration.
    """
    if total_iterations < 1:
        return []
    dense = list(range(1, min(total_iterations, _DENSE_LIMIT) + 1))
    if total_iterations <= _DENSE_LIMIT:
        return dense
    grid = set(dense)
    value = float(_DENSE_LIMIT)
    while value < total_iterations:
        value *= _THIN_FACTOR
        grid.add(min(int(round(value)), total_iterations))
    grid.add(total_iterations)
    return sorted(grid)
