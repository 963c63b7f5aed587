"""Layered-network IR with cost annotations, plus a parameterized U-Net builder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

LAYER_KINDS = (
    "affine",
    "relu",
    "downsample2x",
    "upsample2x",
    "concat",
    "passthrough",
    "slice",
    "source",
    "sink",
)
ELEMENTWISE_KINDS = ("relu", "downsample2x", "upsample2x", "concat", "passthrough", "slice")

SE_COMPUTE_MULTIPLIER = 1.15


@dataclass(frozen=True)
class LayerSpec:
    """One forward function of the network and its abstract costs.

    ``shape`` is the per-item output shape ``(channels, *spatial)``;
    ``activation_elems`` is normally its product.
    """

    id: int
    name: str
    kind: str
    compute_cost: float = 0.0
    param_count: int = 0
    activation_elems: int = 0
    inputs: tuple[int, ...] = ()
    shape: tuple[int, ...] = ()
    block: str = ""
    span: tuple[int, int] | None = None  # channel range for ``slice``


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    output_id: int
    _index: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "_index", {l.id: i for i, l in enumerate(self.layers)})

    def __len__(self) -> int:
        return len(self.layers)

    def layer(self, layer_id: int) -> LayerSpec:
        return self.layers[self._index[layer_id]]

    def position(self, layer_id: int) -> int:
        return self._index[layer_id]

    def __contains__(self, layer_id: int) -> bool:
        return layer_id in self._index

    @property
    def source(self) -> LayerSpec:
        for layer in self.layers:
            if layer.kind == "source":
                return layer
        raise ValueError("graph has no source layer")

    def consumers(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {l.id: [] for l in self.layers}
        for layer in self.layers:
            for u in layer.inputs:
                if u in out:
                    out[u].append(layer.id)
        return out


@dataclass(frozen=True)
class UNetConfig:
    base_filters: int = 32
    encoder_blocks: int = 5
    input_shape: tuple[int, int, int, int] = (1, 64, 64, 64)
    cost_model: Mapping[str, float] = field(default_factory=dict)
    se_blocks: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "cost_model", dict(self.cost_model))

    def filter_width(self, block: int) -> int:
        return self.base_filters * 2 ** (block - 1)

    def multiplier(self, kind: str) -> float:
        return float(self.cost_model.get(kind, 1.0))


class Violation(NamedTuple):
    kind: str  # cycle | dangling | order | arity | cost | source | output | dead | duplicate
    layer_id: int | None
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.violations)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


class CostTotals(NamedTuple):
    compute: float
    params: int
    activations: int


def validate_graph(graph: ModelGraph) -> ValidationReport:
    """Collect every invariant violation; an empty report means the graph is valid."""
    found: list[Violation] = []
    seen: dict[int, int] = {}
    all_ids = [l.id for l in graph.layers]
    id_set = set(all_ids)

    for pos, layer in enumerate(graph.layers):
        if layer.id in seen:
            found.append(Violation("duplicate", layer.id, f"layer id {layer.id} declared twice"))
        if layer.kind not in LAYER_KINDS:
            found.append(Violation("arity", layer.id, f"unknown kind {layer.kind!r}"))
        for u in layer.inputs:
            if u == layer.id:
                found.append(Violation("cycle", layer.id, f"layer {layer.id} consumes itself"))
            elif u not in id_set:
                found.append(Violation("dangling", layer.id, f"input {u} of layer {layer.id} does not exist"))
            elif u not in seen:
                found.append(
                    Violation("order", layer.id, f"input {u} of layer {layer.id} is declared later")
                )
        n_in = len(layer.inputs)
        if layer.kind == "concat" and n_in < 2:
            found.append(Violation("arity", layer.id, f"concat {layer.id} has {n_in} input(s), needs >= 2"))
        elif layer.kind == "source" and n_in != 0:
            found.append(Violation("arity", layer.id, f"source {layer.id} must have no inputs"))
        elif layer.kind not in ("concat", "sink", "source") and n_in != 1:
            found.append(
                Violation("arity", layer.id, f"{layer.kind} {layer.id} has {n_in} inputs, needs exactly 1")
            )
        for name in ("compute_cost", "param_count", "activation_elems"):
            value = getattr(layer, name)
            if not math.isfinite(value) or value < 0:
                found.append(Violation("cost", layer.id, f"{name}={value} must be finite and >= 0"))
        seen[layer.id] = pos

    if _has_cycle(graph, id_set):
        found.append(Violation("cycle", None, "graph contains a directed cycle"))

    sources = [l.id for l in graph.layers if l.kind == "source"]
    if len(sources) != 1:
        found.append(Violation("source", None, f"expected exactly one source, found {len(sources)}"))
    if graph.output_id not in id_set:
        found.append(Violation("output", None, f"output id {graph.output_id} does not exist"))
        return ValidationReport(tuple(found))
    for sink in (l for l in graph.layers if l.kind == "sink"):
        if tuple(sink.inputs) != (graph.output_id,):
            found.append(Violation("output", sink.id, "sink must consume exactly the output layer"))

    consumers = graph.consumers()
    if len(sources) == 1:
        reach = _closure([sources[0]], consumers)
        for layer in graph.layers:
            if layer.id not in reach:
                found.append(Violation("dead", layer.id, f"layer {layer.id} unreachable from source"))
    producers = {l.id: [u for u in l.inputs if u in id_set] for l in graph.layers}
    reaches_output = _closure([graph.output_id], producers)
    for layer in graph.layers:
        if layer.kind != "sink" and layer.id not in reaches_output:
            found.append(Violation("dead", layer.id, f"layer {layer.id} does not reach the output"))
    return ValidationReport(tuple(found))


def _closure(start: Iterable[int], edges: Mapping[int, list[int]]) -> set[int]:
    seen = set(start)
    stack = list(seen)
    while stack:
        node = stack.pop()
        for nxt in edges.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def _has_cycle(graph: ModelGraph, id_set: set[int]) -> bool:
    indeg = {i: 0 for i in id_set}
    out: dict[int, list[int]] = {i: [] for i in id_set}
    for layer in graph.layers:
        for u in set(layer.inputs):
            if u in id_set and layer.id in id_set:
                out[u].append(layer.id)
                indeg[layer.id] += 1
    queue = [i for i, d in indeg.items() if d == 0]
    visited = 0
    while queue:
        node = queue.pop()
        visited += 1
        for nxt in out[node]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                queue.append(nxt)
    return visited != len(id_set)


def total_cost(graph: ModelGraph) -> CostTotals:
    return CostTotals(
        compute=math.fsum(l.compute_cost for l in graph.layers),
        params=sum(l.param_count for l in graph.layers),
        activations=sum(l.activation_elems for l in graph.layers),
    )


class _Builder:
    def __init__(self, config: UNetConfig):
        self.config = config
        self.layers: list[LayerSpec] = []

    def add(self, name, kind, inputs, shape, block="", c_in=0):
        cfg = self.config
        elems = math.prod(shape)
        if kind == "affine":
            cost = elems * c_in * cfg.multiplier("affine")
            params = c_in * shape[0]
        elif kind in ("source", "sink"):
            cost, params = 0.0, 0
        else:
            cost = elems * cfg.multiplier(kind)
            params = 0
        if cfg.se_blocks and block:
            cost *= SE_COMPUTE_MULTIPLIER
        layer = LayerSpec(
            id=len(self.layers),
            name=name,
            kind=kind,
            compute_cost=float(cost),
            param_count=params,
            activation_elems=elems,
            inputs=tuple(inputs),
            shape=tuple(shape),
            block=block,
        )
        self.layers.append(layer)
        return layer

    def conv_pair(self, block, prev, width):
        spatial = prev.shape[1:]
        a1 = self.add(f"{block}.affine1", "affine", [prev.id], (width, *spatial), block, prev.shape[0])
        r1 = self.add(f"{block}.relu1", "relu", [a1.id], a1.shape, block)
        a2 = self.add(f"{block}.affine2", "affine", [r1.id], (width, *spatial), block, width)
        return self.add(f"{block}.relu2", "relu", [a2.id], a2.shape, block)


def build_unet(config: UNetConfig) -> ModelGraph:
    """Build the encoder/decoder graph ``e1..eB, dB..d1`` with concat skips ``s1..s(B-1)``.

    Every block is the sub-chain affine, relu, affine, relu, then a 2x
    downsample (encoder) or 2x upsample (decoder). Decoder block ``d_i`` for
    ``i < B`` starts with the concat ``s_i(e_i, d_{i+1})``.
    """
    depth = config.encoder_blocks
    if depth < 2:
        raise ValueError(f"encoder_blocks must be >= 2, got {depth}")
    if config.base_filters < 1:
        raise ValueError(f"base_filters must be positive, got {config.base_filters}")
    shape = config.input_shape
    if len(shape) < 2 or any(v <= 0 for v in shape):
        raise ValueError(f"input_shape must be positive (channels, *spatial), got {shape}")
    factor = 2**depth
    if any(v % factor for v in shape[1:]):
        raise ValueError(f"spatial dims {shape[1:]} must be divisible by 2**encoder_blocks={factor}")

    b = _Builder(config)
    prev = b.add("input", "source", [], shape)
    skips: dict[int, LayerSpec] = {}
    for i in range(1, depth + 1):
        block = f"e{i}"
        act = b.conv_pair(block, prev, config.filter_width(i))
        half = tuple(v // 2 for v in act.shape[1:])
        prev = b.add(f"{block}.down", "downsample2x", [act.id], (act.shape[0], *half), block)
        skips[i] = prev
    for i in range(depth, 0, -1):
        block = f"d{i}"
        if i < depth:
            skip = skips[i]
            channels = skip.shape[0] + prev.shape[0]
            prev = b.add(f"s{i}", "concat", [skip.id, prev.id], (channels, *prev.shape[1:]), block)
        act = b.conv_pair(block, prev, config.filter_width(i))
        double = tuple(v * 2 for v in act.shape[1:])
        prev = b.add(f"{block}.up", "upsample2x", [act.id], (act.shape[0], *double), block)
    output = prev
    b.add("output", "sink", [output.id], output.shape)
    return ModelGraph(tuple(b.layers), output.id)


def encoder_widths(graph: ModelGraph) -> list[int]:
    widths = []
    for layer in graph.layers:
        if layer.kind == "affine" and layer.block.startswith("e") and layer.name.endswith("affine1"):
            widths.append(layer.shape[0])
    return widths


def width_scaled_layers(graph: ModelGraph) -> list[LayerSpec]:
    """Affine layers whose input and output widths both come from the filter schedule.

    The stem (reading the image channels) is excluded: its input width does
    not scale with ``base_filters``.
    """
    src = graph.source.id
    return [l for l in graph.layers if l.kind == "affine" and src not in l.inputs]


def chain_graph(
    costs: Iterable[float],
    activations: Iterable[int] | int = 1,
    params: Iterable[int] | int = 0,
    input_elems: int = 1,
) -> ModelGraph:
    """A pure chain source -> passthrough* -> sink carrying the given per-layer costs."""
    costs = list(costs)
    n = len(costs)
    acts = [activations] * n if isinstance(activations, int) else list(activations)
    pars = [params] * n if isinstance(params, int) else list(params)
    layers = [LayerSpec(0, "input", "source", activation_elems=input_elems, shape=(input_elems,))]
    for i, (c, a, p) in enumerate(zip(costs, acts, pars), start=1):
        layers.append(
            LayerSpec(i, f"l{i}", "passthrough", float(c), p, a, (i - 1,), shape=(a,), block=f"l{i}")
        )
    layers.append(LayerSpec(n + 1, "output", "sink", inputs=(n,), shape=layers[-1].shape))
    return ModelGraph(tuple(layers), n)
