"""Scenario execution: load a model, resolve its placement, simulate, and measure throughput."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .io import FormatError, Scenario, parse_graph, parse_scenario, parse_sequential, read_text
from .ir import LayerSpec, ModelGraph
from .partition import Partition, partition_balanced, partition_fixed
from .sequentialize import SequentialModel, sequentialize
from .sim import (
    PipelineMetrics,
    ScheduleConfig,
    Timeline,
    conventional_placement,
    round_completions,
    simulate_dependency_schedule,
    simulate_gpipe,
    windowed_throughput,
)

BLOCK_LAYERS = 3


def skip_pair_graph(layers_per_block: int = BLOCK_LAYERS) -> ModelGraph:
    """Two-level U-Net of unit-cost layers: ``e1, e2, d2`` then concat and ``d1``.

    Every block holds ``layers_per_block`` unit-cost, unit-size layers. The
    single skip runs from the end of ``e1`` to the concat opening ``d1``.
    """
    layers = [LayerSpec(0, "input", "source", 0.0, 0, 1, (), (1,))]

    def add(name, kind, inputs, block, cost=1.0):
        layers.append(LayerSpec(len(layers), name, kind, cost, 0, 1, tuple(inputs), (1,), block))
        return len(layers) - 1

    prev = 0
    skip = None
    for block in ("e1", "e2", "d2"):
        for i in range(1, layers_per_block + 1):
            prev = add(f"{block}.f{i}", "passthrough", [prev], block)
        if block == "e1":
            skip = prev
    prev = add("s1", "concat", [skip, prev], "d1", cost=0.0)
    for i in range(1, layers_per_block + 1):
        prev = add(f"d1.f{i}", "passthrough", [prev], "d1")
    add("output", "sink", [prev], "", cost=0.0)
    return ModelGraph(tuple(layers), prev)


def data_path(name: str) -> Path:
    return Path(str(resources.files("pipeunet") / "data" / name))


@dataclass
class ScenarioResult:
    scenario: Scenario
    timeline: Timeline
    metrics: PipelineMetrics
    steady_throughput: float | None
    partition: Partition | None = None
    placement: dict[int, int] | None = None


def scenario_config(sc: Scenario) -> ScheduleConfig:
    return ScheduleConfig(
        k=sc.devices,
        m=sc.micro_batches,
        n=sc.batch_size,
        backward_cost_ratio=sc.backward_ratio,
        comm_cost_per_boundary=sc.comm_cost,
        phase_barrier=sc.barrier,
        repeat_batches=sc.repeat,
        time_unit=sc.time_unit,
    )


def load_model(path: Path) -> ModelGraph | SequentialModel:
    text = read_text(path)
    if text.lstrip().startswith("# sequential model"):
        return parse_sequential(text, str(path))
    return parse_graph(text, str(path))


def _placement_map(sc: Scenario, graph: ModelGraph) -> dict[int, int]:
    if sc.placement == "conventional":
        return conventional_placement(graph, sc.devices)
    if isinstance(sc.placement, dict):
        out: dict[int, int] = {}
        for dev, ids in sc.placement.items():
            for lid in ids:
                if lid in out:
                    raise FormatError(f"layer {lid} placed on devices {out[lid]} and {dev}", key="placement")
                out[lid] = dev
        return out
    raise FormatError(
        f"dependency schedule needs 'conventional' or a device map, got {sc.placement!r}", key="placement"
    )


def _partition(sc: Scenario, seq: SequentialModel) -> Partition:
    if sc.placement == "balanced":
        return partition_balanced(seq, sc.devices)
    if isinstance(sc.placement, list):
        if len(sc.placement) != sc.devices - 1:
            raise FormatError(
                f"{len(sc.placement)} boundaries do not give {sc.devices} stages", key="placement"
            )
        return partition_fixed(seq, sc.placement)
    raise FormatError(f"gpipe schedule needs 'balanced' or a boundary list, got {sc.placement!r}", key="placement")


def run_scenario(sc: Scenario, model: ModelGraph | SequentialModel | None = None) -> ScenarioResult:
    """Simulate ``sc``; steady-state throughput is reported when ``repeat >= 8``."""
    if model is None:
        model = load_model(sc.model_path())
    cfg = scenario_config(sc)
    partition = placement = None
    if sc.schedule == "gpipe":
        seq = model if isinstance(model, SequentialModel) else sequentialize(model)
        partition = _partition(sc, seq)
        timeline, metrics = simulate_gpipe(partition, cfg)
    else:
        graph = model.graph if isinstance(model, SequentialModel) else model
        placement = _placement_map(sc, graph)
        timeline, metrics = simulate_dependency_schedule(graph, placement, cfg)
    steady = None
    if cfg.repeat_batches >= 8:
        steady = windowed_throughput(round_completions(timeline), cfg.k)
    return ScenarioResult(sc, timeline, metrics, steady, partition, placement)


def load_scenario(path: str | Path) -> Scenario:
    return parse_scenario(read_text(path), str(path))
