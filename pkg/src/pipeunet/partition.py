"""Contiguous K-way partitioning of a cell chain (linear partition problem)."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .sequentialize import MAIN, SequentialModel

OBJECTIVES = ("compute", "params", "memory")


@dataclass(frozen=True)
class Partition:
    """Stage ``s`` covers cells ``[bounds[s], bounds[s+1])`` with ``bounds = (0, *boundaries, n)``."""

    boundaries: tuple[int, ...]
    n_cells: int
    stage_costs: tuple[float, ...]
    stage_params: tuple[int, ...]
    stage_activations: tuple[int, ...]
    stage_cell_counts: tuple[int, ...]
    stage_input_sizes: tuple[int, ...]
    stage_passthrough: tuple[int, ...]

    @property
    def k(self) -> int:
        return len(self.stage_costs)

    @property
    def bottleneck(self) -> float:
        return max(self.stage_costs)

    def stage_ranges(self) -> list[range]:
        bounds = (0, *self.boundaries, self.n_cells)
        return [range(a, b) for a, b in zip(bounds, bounds[1:])]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_cells": self.n_cells,
            "boundaries": list(self.boundaries),
            "bottleneck": self.bottleneck,
            "stages": [
                {
                    "cells": [r.start, r.stop],
                    "cost": self.stage_costs[s],
                    "params": self.stage_params[s],
                    "activations": self.stage_activations[s],
                    "cell_count": self.stage_cell_counts[s],
                    "input_size": self.stage_input_sizes[s],
                    "passthrough": self.stage_passthrough[s],
                }
                for s, r in enumerate(self.stage_ranges())
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Partition":
        stages = data["stages"]
        return cls(
            boundaries=tuple(int(b) for b in data["boundaries"]),
            n_cells=int(data["n_cells"]),
            stage_costs=tuple(float(s["cost"]) for s in stages),
            stage_params=tuple(int(s["params"]) for s in stages),
            stage_activations=tuple(int(s["activations"]) for s in stages),
            stage_cell_counts=tuple(int(s["cell_count"]) for s in stages),
            stage_input_sizes=tuple(int(s["input_size"]) for s in stages),
            stage_passthrough=tuple(int(s["passthrough"]) for s in stages),
        )


def cell_weights(seq: SequentialModel, objective: str = "compute") -> list[float]:
    if objective == "compute":
        return [seq.cell_cost(c) for c in seq.cells]
    if objective == "params":
        return [float(seq.cell_params(c)) for c in seq.cells]
    if objective == "memory":
        return [float(seq.cell_activation(c) + seq.passthrough_elems(c)) for c in seq.cells]
    raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")


def min_bottleneck(weights: Sequence[float], k: int) -> Fraction:
    """Exact optimum of the min-max contiguous k-partition (O(k n^2) DP over prefix sums)."""
    n = len(weights)
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= {n}, got {k}")
    prefix = [Fraction(0)]
    for w in weights:
        prefix.append(prefix[-1] + Fraction(w))
    # best[i]: optimal bottleneck for the first i cells in the current number of stages
    best = [prefix[i] for i in range(n + 1)]
    for stages in range(2, k + 1):
        nxt = [None] * (n + 1)
        for i in range(stages, n + 1):
            value = None
            for t in range(stages - 1, i):
                cand = max(best[t], prefix[i] - prefix[t])
                if value is None or cand < value:
                    value = cand
            nxt[i] = value
        best = nxt
    return best[n]


def split_boundaries(weights: Sequence[float], k: int, limit: Fraction) -> tuple[int, ...]:
    """Lexicographically smallest cut vector whose stages all weigh at most ``limit``."""
    n = len(weights)
    prefix = [Fraction(0)]
    for w in weights:
        prefix.append(prefix[-1] + Fraction(w))

    def min_stages(start: int) -> int:
        count, acc = 0, None
        for i in range(start, n):
            w = prefix[i + 1] - prefix[i]
            if acc is None or acc + w > limit:
                count += 1
                acc = w
            else:
                acc += w
        return count

    cuts: list[int] = []
    start = 0
    for remaining in range(k - 1, 0, -1):
        for cut in range(start + 1, n - remaining + 1):
            if prefix[cut] - prefix[start] > limit:
                break
            if min_stages(cut) <= remaining:
                cuts.append(cut)
                start = cut
                break
        else:
            raise ValueError(f"no feasible split under bottleneck {limit}")
    return tuple(cuts)


def partition_balanced(seq: SequentialModel, k: int, objective: str = "compute") -> Partition:
    """Contiguous partition minimizing the heaviest stage, earliest cuts on ties."""
    n = len(seq.cells)
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= {n} (cell count), got {k}")
    weights = cell_weights(seq, objective)
    limit = min_bottleneck(weights, k)
    return partition_fixed(seq, split_boundaries(weights, k, limit))


def partition_fixed(seq: SequentialModel, boundaries: Sequence[int]) -> Partition:
    n = len(seq.cells)
    cuts = tuple(int(b) for b in boundaries)
    if any(b <= 0 or b >= n for b in cuts):
        raise ValueError(f"boundaries {list(cuts)} must lie strictly inside (0, {n})")
    if any(a >= b for a, b in zip(cuts, cuts[1:])):
        raise ValueError(f"boundaries {list(cuts)} must be strictly increasing")
    bounds = (0, *cuts, n)
    costs, params, acts, counts, inputs, passing = [], [], [], [], [], []
    for a, b in zip(bounds, bounds[1:]):
        cells = seq.cells[a:b]
        costs.append(sum(seq.cell_cost(c) for c in cells))
        params.append(sum(seq.cell_params(c) for c in cells))
        pt = sum(seq.passthrough_elems(c) for c in cells)
        acts.append(sum(seq.cell_activation(c) for c in cells) + pt)
        counts.append(len(cells))
        passing.append(pt)
        if a == 0:
            inputs.append(seq.input_elems)
        else:
            first, prev = seq.cells[a], seq.cells[a - 1]
            size = seq.main_size(prev) if MAIN in first.consumes_slots else 0
            crossing = (set(first.consumes_slots) | set(first.passthrough_slots)) - {MAIN}
            inputs.append(size + sum(seq.slot_sizes[s] for s in crossing))
    return Partition(
        boundaries=cuts,
        n_cells=n,
        stage_costs=tuple(costs),
        stage_params=tuple(params),
        stage_activations=tuple(acts),
        stage_cell_counts=tuple(counts),
        stage_input_sizes=tuple(inputs),
        stage_passthrough=tuple(passing),
    )


def stage_weights(weights: Sequence[float], boundaries: Sequence[int]) -> list[float]:
    bounds = (0, *boundaries, len(weights))
    return [sum(weights[a:b]) for a, b in zip(bounds, bounds[1:])]
