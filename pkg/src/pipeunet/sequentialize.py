"""Rewrite a U-Net-shaped graph into a strict chain of cells.

Each skip source is split in two: its ordinary output feeds the next cell
(``main``) and a duplicate travels in a named pass-through slot
(``skip_<i>``) through every intermediate cell until the concat that reads
it. After the rewrite every cell reads only from its immediate predecessor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .ir import ModelGraph

MAIN = "main"


class SequentializationError(ValueError):
    def __init__(self, message: str, edge: tuple[int, int] | None = None):
        super().__init__(message)
        self.edge = edge


@dataclass(frozen=True)
class Cell:
    id: int
    body: tuple[int, ...]
    consumes_slots: tuple[str, ...] = ()
    produces_slots: tuple[str, ...] = ()
    passthrough_slots: tuple[str, ...] = ()


@dataclass(frozen=True)
class SequentialModel:
    graph: ModelGraph
    cells: tuple[Cell, ...]
    slot_sizes: Mapping[str, int] = field(default_factory=dict)
    slot_sources: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(self, "slot_sizes", dict(self.slot_sizes))
        object.__setattr__(self, "slot_sources", dict(self.slot_sources))

    def __len__(self) -> int:
        return len(self.cells)

    def cell_of(self) -> dict[int, int]:
        return {lid: c.id for c in self.cells for lid in c.body}

    def cell_cost(self, cell: Cell) -> float:
        return sum(self.graph.layer(i).compute_cost for i in cell.body)

    def cell_params(self, cell: Cell) -> int:
        return sum(self.graph.layer(i).param_count for i in cell.body)

    def cell_activation(self, cell: Cell) -> int:
        """Body activations excluding the source (the model input is not a cell product)."""
        return sum(
            self.graph.layer(i).activation_elems for i in cell.body if self.graph.layer(i).kind != "source"
        )

    def passthrough_elems(self, cell: Cell) -> int:
        return sum(self.slot_sizes[s] for s in cell.passthrough_slots)

    def main_size(self, cell: Cell) -> int:
        return self.graph.layer(cell.body[-1]).activation_elems

    @property
    def input_elems(self) -> int:
        return self.graph.source.activation_elems


def sequentialize(model: ModelGraph | SequentialModel) -> SequentialModel:
    """Turn ``model`` into a chain of single-layer cells with pass-through skip slots.

    The source is folded into the first cell and the sink into the last.
    An already-sequential model is rebuilt from its graph, which yields an
    equal model.
    """
    graph = model.graph if isinstance(model, SequentialModel) else model
    layers = graph.layers
    if not layers or layers[0].kind != "source":
        raise SequentializationError("graph must start with its source layer")

    position = {l.id: i for i, l in enumerate(layers)}
    skip_edges: list[tuple[int, int]] = []
    for pos, layer in enumerate(layers[1:], start=1):
        prev = layers[pos - 1].id
        if prev not in layer.inputs:
            raise SequentializationError(
                f"layer {layer.id} does not consume its predecessor {prev}; chain is broken",
                (prev, layer.id),
            )
        for u in layer.inputs:
            if u == prev:
                continue
            if u not in position or position[u] >= pos:
                raise SequentializationError(f"edge {u}->{layer.id} is not forward", (u, layer.id))
            if layer.kind != "concat":
                raise SequentializationError(
                    f"long-range edge {u}->{layer.id} ends at a {layer.kind}, not a concat",
                    (u, layer.id),
                )
            skip_edges.append((u, layer.id))

    groups: list[list[int]] = [[l.id] for l in layers]
    if len(groups) > 1:
        groups[1] = groups[0] + groups[1]
        groups.pop(0)
    if len(groups) > 1 and layers[-1].kind == "sink":
        groups[-2] = groups[-2] + groups[-1]
        groups.pop()
    cell_of = {lid: ci for ci, g in enumerate(groups) for lid in g}

    slot_sources: dict[str, int] = {}
    slot_name: dict[int, str] = {}
    for u, _ in sorted(skip_edges, key=lambda e: position[e[0]]):
        if u not in slot_name:
            name = f"skip_{len(slot_name) + 1}"
            slot_name[u] = name
            slot_sources[name] = u

    consumes: list[set[str]] = [set() for _ in groups]
    produces: list[set[str]] = [set() for _ in groups]
    passing: list[set[str]] = [set() for _ in groups]
    for u, v in skip_edges:
        cu, cv = cell_of[u], cell_of[v]
        if cu == cv:
            continue
        name = slot_name[u]
        produces[cu].add(name)
        consumes[cv].add(name)
        for c in range(cu + 1, cv):
            passing[c].add(name)
    # a slot still needed downstream is forwarded, not dropped, by a cell that also reads it
    for name in slot_sources:
        users = [c for c in range(len(groups)) if name in consumes[c]]
        for c in users[:-1]:
            passing[c].add(name)
    for c in range(len(groups)):
        if c > 0:
            consumes[c].add(MAIN)
        produces[c].add(MAIN)

    order = sorted(slot_sources, key=lambda s: int(s.split("_")[1]))

    def ordered(names: set[str]) -> tuple[str, ...]:
        return tuple(n for n in [MAIN, *order] if n in names)

    cells = tuple(
        Cell(
            id=c,
            body=tuple(g),
            consumes_slots=ordered(consumes[c]),
            produces_slots=ordered(produces[c]),
            passthrough_slots=ordered(passing[c]),
        )
        for c, g in enumerate(groups)
    )
    sizes = {name: graph.layer(src).activation_elems for name, src in slot_sources.items()}
    return SequentialModel(graph, cells, sizes, slot_sources)


def passthrough_memory_overhead(seq: SequentialModel) -> int:
    """Elements per batch item held in slots that cells forward without reading."""
    total = 0
    for cell in seq.cells:
        for name in cell.passthrough_slots:
            if name not in cell.consumes_slots:
                total += seq.slot_sizes[name]
    return total


def passthrough_crossings(seq: SequentialModel) -> int:
    return sum(
        1 for cell in seq.cells for name in cell.passthrough_slots if name not in cell.consumes_slots
    )


def chain_violations(seq: SequentialModel) -> list[str]:
    """Check that every layer input is available from its own cell or the preceding one."""
    problems: list[str] = []
    graph = seq.graph
    seen: set[int] = set()
    for pos, cell in enumerate(seq.cells):
        if pos > 0:
            prev = seq.cells[pos - 1]
            offered = set(prev.produces_slots) | set(prev.passthrough_slots)
            for name in cell.consumes_slots:
                if name not in offered:
                    problems.append(f"cell {cell.id} reads {name!r} not offered by cell {prev.id}")
            for name in cell.passthrough_slots:
                if name not in offered:
                    problems.append(f"cell {cell.id} forwards {name!r} not offered by cell {prev.id}")
        available: set[int] = set()
        if pos > 0:
            prev = seq.cells[pos - 1]
            if MAIN in cell.consumes_slots:
                available.add(prev.body[-1])
            for name in cell.consumes_slots:
                if name != MAIN:
                    available.add(seq.slot_sources[name])
        for lid in cell.body:
            if lid in seen:
                problems.append(f"layer {lid} appears in more than one cell")
            for u in graph.layer(lid).inputs:
                if u not in available:
                    problems.append(f"layer {lid} in cell {cell.id} reads {u}, which is not adjacent")
            available.add(lid)
            seen.add(lid)
        for name in cell.produces_slots:
            if name != MAIN and seq.slot_sources[name] not in cell.body:
                problems.append(f"cell {cell.id} produces {name!r} without computing its source")
    missing = {l.id for l in graph.layers} - seen
    if missing:
        problems.append(f"layers {sorted(missing)} belong to no cell")
    return problems
