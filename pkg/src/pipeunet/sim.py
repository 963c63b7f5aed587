"""Event-driven simulation of pipelined and conventional model-parallel schedules.

All schedules are produced by one list scheduler: a task becomes ready when
its dependencies have finished, and an idle device picks its ready task with
the smallest ``(round, phase, micro_batch, order)`` key, where backward
outranks forward. Zero-cost tasks complete instantly without holding a
device.
"""

from __future__ import annotations

import heapq
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

from .ir import ModelGraph
from .partition import Partition

PHASES = ("forward", "backward", "comm")
_PHASE_RANK = {"backward": 0, "forward": 1, "comm": 2, "barrier": 3}


@dataclass(frozen=True)
class ScheduleConfig:
    k: int = 1
    m: int = 1
    n: int | None = None  # defaults to m (one item per micro-batch)
    backward_cost_ratio: float = 2.0
    comm_cost_per_boundary: float = 0.0
    phase_barrier: bool = True
    repeat_batches: int = 1
    forward_only: bool = False
    time_unit: float = 1.0  # work units per unit of device time
    recompute: bool = True
    max_in_flight: int | None = None  # rounds admitted concurrently; None = unlimited

    def __post_init__(self):
        if self.n is None:
            object.__setattr__(self, "n", self.m)
        if self.k < 1 or self.m < 1:
            raise ValueError(f"k and m must be >= 1 (k={self.k}, m={self.m})")
        if self.n < 1 or self.n % self.m:
            raise ValueError(f"batch size {self.n} must be a positive multiple of m={self.m}")
        if self.repeat_batches < 1:
            raise ValueError("repeat_batches must be >= 1")
        if self.backward_cost_ratio < 0 or self.comm_cost_per_boundary < 0 or self.time_unit <= 0:
            raise ValueError("costs must be non-negative and time_unit positive")

    @property
    def micro_batch_size(self) -> int:
        return self.n // self.m


@dataclass(frozen=True)
class Event:
    device: int
    start: float
    end: float
    phase: str
    micro_batch: int
    stage: int
    round: int = 0

    @property
    def resource(self) -> tuple:
        # comm events occupy the (sender, receiver) link, not the device; stage holds the receiver
        return ("link", self.device, self.stage) if self.phase == "comm" else ("dev", self.device)


@dataclass(frozen=True)
class Timeline:
    events: tuple[Event, ...]

    @property
    def horizon(self) -> float:
        return max((e.end for e in self.events), default=0.0)

    def of_phase(self, phase: str) -> list[Event]:
        return [e for e in self.events if e.phase == phase]


@dataclass(frozen=True)
class PipelineMetrics:
    makespan: float
    throughput: float
    utilization: float
    bubble_fraction: float
    per_device_peak_memory: tuple[float, ...]
    phase_span: Mapping[str, float] = field(default_factory=dict)
    phase_utilization: Mapping[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "makespan": self.makespan,
            "throughput": self.throughput,
            "utilization": self.utilization,
            "bubble_fraction": self.bubble_fraction,
            "per_device_peak_memory": list(self.per_device_peak_memory),
            "phase_span": dict(self.phase_span),
            "phase_utilization": dict(self.phase_utilization),
        }


@dataclass
class _Task:
    resource: Hashable | None
    duration: float
    key: tuple
    deps: list[int]
    event: tuple  # (device, phase, micro, stage, round)


class _Graph:
    def __init__(self):
        self.tasks: list[_Task] = []

    def add(self, resource, duration, key, deps, event) -> int:
        if duration <= 0:
            resource, duration = None, 0.0
        self.tasks.append(_Task(resource, duration, key, list(deps), event))
        return len(self.tasks) - 1


def _admission(cfg: ScheduleConfig, r: int, done_ids: list[int]) -> list[int]:
    limit = cfg.max_in_flight
    if limit is None or r < limit:
        return []
    return [done_ids[r - limit]]


def _list_schedule(graph: _Graph) -> list[tuple[int, float, float]]:
    tasks = graph.tasks
    waiting = [len(t.deps) for t in tasks]
    dependents: list[list[int]] = [[] for _ in tasks]
    for i, t in enumerate(tasks):
        for d in t.deps:
            dependents[d].append(i)
    ready: dict[Hashable, list] = defaultdict(list)
    busy: set[Hashable] = set()
    completions: list = []
    started: list[tuple[int, float, float]] = []
    now = 0.0

    def release(i: int) -> None:
        task = tasks[i]
        if task.resource is None:
            started.append((i, now, now))
            heapq.heappush(completions, (now, i))
        else:
            heapq.heappush(ready[task.resource], (task.key, i))

    for i, w in enumerate(waiting):
        if w == 0:
            release(i)
    done = 0
    while True:
        while completions and completions[0][0] <= now:
            _, i = heapq.heappop(completions)
            done += 1
            task = tasks[i]
            if task.resource is not None:
                busy.discard(task.resource)
            for j in dependents[i]:
                waiting[j] -= 1
                if waiting[j] == 0:
                    release(j)
        for res in sorted(r for r, q in ready.items() if q and r not in busy):
            _, i = heapq.heappop(ready[res])
            end = now + tasks[i].duration
            busy.add(res)
            started.append((i, now, end))
            heapq.heappush(completions, (end, i))
        if not completions:
            break
        now = completions[0][0]
    if done != len(tasks):
        raise RuntimeError(f"schedule deadlocked after {done} of {len(tasks)} tasks")
    return started


def _timeline(graph: _Graph, started) -> Timeline:
    events = []
    for i, start, end in started:
        device, phase, micro, stage, rnd = graph.tasks[i].event
        if phase == "barrier":
            continue
        events.append(Event(device, start, end, phase, micro, stage, rnd))
    events.sort(key=lambda e: (e.start, e.device, _PHASE_RANK[e.phase], e.micro_batch, e.stage, e.round))
    return Timeline(tuple(events))


def simulate_gpipe(partition: Partition, cfg: ScheduleConfig) -> tuple[Timeline, PipelineMetrics]:
    """GPipe schedule: micro-batches flow forward through the stages, then backward.

    With ``phase_barrier`` every backward of a round waits for all of that
    round's forwards. Rounds (mini-batches) are independent of each other,
    so repeated rounds overlap as far as device exclusivity allows.
    """
    if partition.k != cfg.k:
        raise ValueError(f"partition has {partition.k} stages but the schedule has k={cfg.k} devices")
    k, m = cfg.k, cfg.m
    fwd = [c / cfg.time_unit for c in partition.stage_costs]
    comm = cfg.comm_cost_per_boundary / cfg.time_unit
    g = _Graph()
    done_ids: list[int] = []
    for r in range(cfg.repeat_batches):
        f_ids: dict[tuple[int, int], int] = {}
        admit = _admission(cfg, r, done_ids)
        for j in range(m):
            for s in range(k):
                deps = list(admit) if s == 0 else []
                if s > 0:
                    deps = [f_ids[s - 1, j]]
                    if comm > 0:
                        deps = [g.add(("link", s - 1, s), comm, (r, 2, j, s), deps, (s - 1, "comm", j, s, r))]
                f_ids[s, j] = g.add(("dev", s), fwd[s], (r, 1, j, s), deps, (s, "forward", j, s, r))
        if cfg.forward_only:
            done_ids.append(g.add(None, 0.0, (r, 3, 0, 0), [f_ids[k - 1, j] for j in range(m)], (0, "barrier", 0, 0, r)))
            continue
        barrier = None
        if cfg.phase_barrier:
            barrier = g.add(None, 0.0, (r, 3, 0, 0), [f_ids[k - 1, j] for j in range(m)], (0, "barrier", 0, 0, r))
        b_ids: dict[tuple[int, int], int] = {}
        for j in range(m):
            for s in range(k - 1, -1, -1):
                deps = [f_ids[s, j]]
                if barrier is not None:
                    deps.append(barrier)
                if s < k - 1:
                    up = b_ids[s + 1, j]
                    if comm > 0:
                        up = g.add(("link", s + 1, s), comm, (r, 2, j, -s), [up], (s + 1, "comm", j, s, r))
                    deps.append(up)
                dur = fwd[s] * cfg.backward_cost_ratio
                b_ids[s, j] = g.add(("dev", s), dur, (r, 0, j, -s), deps, (s, "backward", j, s, r))
        done_ids.append(g.add(None, 0.0, (r, 3, 0, 0), [b_ids[0, j] for j in range(m)], (0, "barrier", 0, 0, r)))
    timeline = _timeline(g, _list_schedule(g))
    return timeline, compute_metrics(timeline, cfg, estimate_memory(partition, cfg))


def simulate_dependency_schedule(
    graph: ModelGraph, placement: Mapping[int, int], cfg: ScheduleConfig
) -> tuple[Timeline, PipelineMetrics]:
    """Schedule the raw layer graph on devices given by ``placement`` (layer id -> device).

    Every graph edge is a dependency, including long-range skip edges that
    cross devices; backward of a layer waits on the backward of all its
    consumers. Event ``stage`` fields hold layer ids.
    """
    missing = [l.id for l in graph.layers if l.id not in placement]
    if missing:
        raise ValueError(f"placement does not cover layers {missing}")
    bad = sorted({d for d in placement.values() if not 0 <= d < cfg.k})
    if bad:
        raise ValueError(f"placement uses devices {bad} outside 0..{cfg.k - 1}")
    consumers = graph.consumers()
    comm = cfg.comm_cost_per_boundary / cfg.time_unit
    g = _Graph()
    done_ids: list[int] = []
    for r in range(cfg.repeat_batches):
        f_ids: dict[tuple[int, int], int] = {}
        admit = _admission(cfg, r, done_ids)
        for j in range(cfg.m):
            for pos, layer in enumerate(graph.layers):
                dev = placement[layer.id]
                deps = list(admit) if not layer.inputs else []
                for u in layer.inputs:
                    dep = f_ids[u, j]
                    src = placement[u]
                    if src != dev and comm > 0:
                        dep = g.add(("link", src, dev), comm, (r, 2, j, pos), [dep], (src, "comm", j, dev, r))
                    deps.append(dep)
                dur = layer.compute_cost / cfg.time_unit
                f_ids[layer.id, j] = g.add(("dev", dev), dur, (r, 1, j, pos), deps, (dev, "forward", j, layer.id, r))
        if cfg.forward_only:
            done_ids.append(g.add(None, 0.0, (r, 3, 0, 0), list(f_ids.values()), (0, "barrier", 0, 0, r)))
            continue
        barrier = None
        if cfg.phase_barrier:
            barrier = g.add(None, 0.0, (r, 3, 0, 0), list(f_ids.values()), (0, "barrier", 0, 0, r))
        b_ids: dict[tuple[int, int], int] = {}
        for j in range(cfg.m):
            for pos in range(len(graph.layers) - 1, -1, -1):
                layer = graph.layers[pos]
                dev = placement[layer.id]
                deps = [f_ids[layer.id, j]]
                if barrier is not None:
                    deps.append(barrier)
                for v in consumers[layer.id]:
                    dep = b_ids[v, j]
                    dst = placement[v]
                    if dst != dev and comm > 0:
                        dep = g.add(("link", dst, dev), comm, (r, 2, j, -pos), [dep], (dst, "comm", j, dev, r))
                    deps.append(dep)
                dur = layer.compute_cost / cfg.time_unit * cfg.backward_cost_ratio
                b_ids[layer.id, j] = g.add(
                    ("dev", dev), dur, (r, 0, j, -pos), deps, (dev, "backward", j, layer.id, r)
                )
        done_ids.append(g.add(None, 0.0, (r, 3, 0, 0), list(b_ids.values()), (0, "barrier", 0, 0, r)))
    timeline = _timeline(g, _list_schedule(g))
    memory = estimate_placement_memory(graph, placement, cfg)
    return timeline, compute_metrics(timeline, cfg, memory)


def compute_metrics(timeline: Timeline, cfg: ScheduleConfig, memory: Sequence[float] = ()) -> PipelineMetrics:
    compute = [e for e in timeline.events if e.phase in ("forward", "backward")]
    start = min((e.start for e in timeline.events), default=0.0)
    makespan = timeline.horizon - start
    busy = sum(e.end - e.start for e in compute)
    util = busy / (cfg.k * makespan) if makespan > 0 else 1.0
    spans, utils = {}, {}
    for phase in ("forward", "backward"):
        evs = [e for e in compute if e.phase == phase]
        if not evs:
            continue
        span = max(e.end for e in evs) - min(e.start for e in evs)
        spans[phase] = span
        phase_busy = sum(e.end - e.start for e in evs)
        utils[phase] = phase_busy / (cfg.k * span) if span > 0 else 1.0
    throughput = cfg.repeat_batches / makespan if makespan > 0 else math.inf
    return PipelineMetrics(
        makespan=makespan,
        throughput=throughput,
        utilization=util,
        bubble_fraction=1.0 - util,
        per_device_peak_memory=tuple(memory),
        phase_span=spans,
        phase_utilization=utils,
    )


def round_completions(timeline: Timeline) -> list[float]:
    last: dict[int, float] = {}
    for e in timeline.events:
        last[e.round] = max(last.get(e.round, 0.0), e.end)
    return [last[r] for r in sorted(last)]


def windowed_throughput(completions: Sequence[float], warmup: int) -> float:
    """Rounds finished per unit time after discarding ``warmup`` rounds at each end.

    List schedules settle into a repeating pattern that may span several
    rounds, so the window is trimmed to a whole number of repetitions when
    one exists; otherwise all rounds in the window are used.
    """
    times = sorted(completions)
    lo = warmup - 1 if warmup > 0 else None
    hi = len(times) - warmup - 1
    if hi - (lo if lo is not None else -1) < 1:
        raise ValueError(f"{len(times)} rounds leave no measurement window after discarding {warmup} at each end")
    window = ([0.0] if lo is None else []) + times[(lo or 0) : hi + 1]
    span = len(window) - 1
    for period in range(1, span // 2 + 1):
        gaps = [b - a for a, b in zip(window, window[period:])]
        if max(gaps) - min(gaps) <= 1e-9 * max(1.0, max(gaps)):
            reps = span // period
            return reps * period / (window[reps * period] - window[0])
    return span / (window[-1] - window[0])


def steady_state_throughput(
    target: Partition | ModelGraph,
    cfg: ScheduleConfig,
    placement: Mapping[int, int] | None = None,
) -> float:
    """Batches per unit device-time once the pipeline is saturated.

    The first and last ``k`` rounds are discarded as warm-up and drain.
    """
    if cfg.repeat_batches < 8:
        raise ValueError(f"steady state needs repeat_batches >= 8, got {cfg.repeat_batches}")
    if isinstance(target, Partition):
        timeline, _ = simulate_gpipe(target, cfg)
    else:
        if placement is None:
            raise ValueError("a raw graph needs a layer placement")
        timeline, _ = simulate_dependency_schedule(target, placement, cfg)
    return windowed_throughput(round_completions(timeline), cfg.k)


def estimate_memory(partition: Partition, cfg: ScheduleConfig) -> list[float]:
    """Per-device peak activation elements.

    Each device stashes its stage input for all ``N`` items until backward,
    and keeps the stage's working set (cell activations plus pass-through
    slots) for one micro-batch of ``N/M`` items, or for all ``N`` items when
    recomputation is off.
    """
    n = cfg.n
    live = n // cfg.m if cfg.recompute else n
    return [
        n * partition.stage_input_sizes[s] + live * partition.stage_activations[s]
        for s in range(partition.k)
    ]


def estimate_placement_memory(graph: ModelGraph, placement: Mapping[int, int], cfg: ScheduleConfig) -> list[float]:
    n = cfg.n
    live = n // cfg.m if cfg.recompute else n
    stash = [0] * cfg.k
    work = [0] * cfg.k
    received: set[tuple[int, int]] = set()
    for layer in graph.layers:
        dev = placement[layer.id]
        if layer.kind == "source":
            stash[dev] += layer.activation_elems
            continue
        work[dev] += layer.activation_elems
        for u in layer.inputs:
            if placement[u] != dev and (u, dev) not in received:
                received.add((u, dev))
                stash[dev] += graph.layer(u).activation_elems
    return [n * stash[d] + live * work[d] for d in range(cfg.k)]


def timeline_violations(timeline: Timeline) -> list[str]:
    """Events sharing a device (or link) must not overlap in time."""
    problems = []
    by_resource: dict[tuple, list[Event]] = defaultdict(list)
    for e in timeline.events:
        if e.end < e.start:
            problems.append(f"event ends before it starts: {e}")
        by_resource[e.resource].append(e)
    for res, evs in by_resource.items():
        evs = sorted(evs, key=lambda e: (e.start, e.end))
        for a, b in zip(evs, evs[1:]):
            if b.start < a.end and b.end > b.start and a.end > a.start:
                problems.append(f"{res}: {a} overlaps {b}")
    return problems


def gpipe_dependency_violations(timeline: Timeline, k: int, m: int, barrier: bool = True) -> list[str]:
    """Check GPipe ordering: stage chains in both directions, and the phase barrier."""
    problems = []
    idx: dict[tuple, Event] = {}
    for e in timeline.events:
        if e.phase in ("forward", "backward"):
            idx[e.phase, e.stage, e.micro_batch, e.round] = e
    rounds = sorted({e.round for e in timeline.events})
    for r in rounds:
        last_forward = max(
            (e.end for key, e in idx.items() if key[0] == "forward" and key[3] == r), default=0.0
        )
        for j in range(m):
            for s in range(k):
                f = idx.get(("forward", s, j, r))
                b = idx.get(("backward", s, j, r))
                if f is None:
                    problems.append(f"missing forward stage {s} micro {j} round {r}")
                    continue
                if s > 0:
                    prev = idx.get(("forward", s - 1, j, r))
                    if prev is not None and prev.end > f.start:
                        problems.append(f"F({s},{j}) starts before F({s - 1},{j}) ends")
                if b is None:
                    continue
                if b.start < f.end:
                    problems.append(f"B({s},{j}) starts before its forward ends")
                if barrier and b.start < last_forward:
                    problems.append(f"B({s},{j}) starts before all forwards of round {r} end")
                if s < k - 1:
                    up = idx.get(("backward", s + 1, j, r))
                    if up is not None and up.end > b.start:
                        problems.append(f"B({s},{j}) starts before B({s + 1},{j}) ends")
    return problems


def conventional_placement(graph: ModelGraph, k: int) -> dict[int, int]:
    """Device map for an unmodified U-Net under stage-adjacent transfer only.

    A skip edge cannot hop over stages, so each encoder block ``e_i`` that
    feeds a skip shares a device with its decoder ``d_i``; the bottom pair
    is free to split. Units are ordered ``(e1+d1, ..., e_{B-1}+d_{B-1}, e_B,
    d_B)`` and spread over ``k`` devices by the bottleneck partitioner.
    """
    from .partition import min_bottleneck, split_boundaries

    blocks = sorted({l.block for l in graph.layers if l.block}, key=lambda b: (b[0], int(b[1:])))
    depth = max(int(b[1:]) for b in blocks if b.startswith("e"))
    units: list[set[str]] = [{f"e{i}", f"d{i}"} for i in range(1, depth)] + [{f"e{depth}"}, {f"d{depth}"}]
    weight = [sum(l.compute_cost for l in graph.layers if l.block in u) for u in units]
    if k > len(units):
        raise ValueError(f"conventional placement supports at most {len(units)} devices, got {k}")
    cuts = split_boundaries(weight, k, min_bottleneck(weight, k))
    bounds = (0, *cuts, len(units))
    device_of_block = {}
    for dev, (a, b) in enumerate(zip(bounds, bounds[1:])):
        for unit in units[a:b]:
            for name in unit:
                device_of_block[name] = dev
    return {l.id: device_of_block.get(l.block, 0) for l in graph.layers}


def device_loads(graph: ModelGraph, placement: Mapping[int, int], k: int) -> list[float]:
    loads = [0.0] * k
    for layer in graph.layers:
        loads[placement[layer.id]] += layer.compute_cost
    return loads
