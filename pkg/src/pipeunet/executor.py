"""Small dense numeric engine: serial and pipelined execution with hand-written reverse mode.

Tensors are float64 numpy arrays shaped ``(batch, channels, *spatial)``.
Affine layers are bias-free per-voxel channel mixes (1x1x1 convolutions)
evaluated one batch item at a time, so an item's result does not depend on
how the batch was split.
"""

from __future__ import annotations

import itertools
import queue
import threading
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .ir import ModelGraph
from .partition import Partition
from .sequentialize import MAIN, SequentialModel
from .sim import Event, ScheduleConfig, Timeline

Params = dict[int, np.ndarray]


class ShapeError(ValueError):
    def __init__(self, layer_id: int, message: str):
        super().__init__(f"layer {layer_id}: {message}")
        self.layer_id = layer_id


@dataclass(frozen=True)
class LossSpec:
    """Sum of squared errors against ``target``."""

    target: np.ndarray

    def value(self, y: np.ndarray) -> float:
        return float(np.sum((y - self.target) ** 2))

    def grad(self, y: np.ndarray) -> np.ndarray:
        return 2.0 * (y - self.target)

    def slice(self, lo: int, hi: int) -> "LossSpec":
        return LossSpec(self.target[lo:hi])


@dataclass(frozen=True)
class GradientSet:
    grads: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.grads)

    def __getitem__(self, layer_id: int) -> np.ndarray:
        return self.grads[layer_id]

    def keys(self):
        return self.grads.keys()

    def max_relative_error(self, other: "GradientSet") -> float:
        if set(self.grads) != set(other.grads):
            raise ValueError("gradient sets cover different layers")
        return max((relative_error(self.grads[i], other.grads[i]) for i in self.grads), default=0.0)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative deviation ``max|a-b| / max(max|a|, max|b|)``."""
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
    diff = float(np.max(np.abs(a - b), initial=0.0))
    if scale == 0.0:
        return diff
    return diff / scale


def _graph(model: ModelGraph | SequentialModel) -> ModelGraph:
    return model.graph if isinstance(model, SequentialModel) else model


def param_shapes(model: ModelGraph | SequentialModel) -> dict[int, tuple[int, int]]:
    graph = _graph(model)
    shapes = {}
    for layer in graph.layers:
        if layer.kind == "affine":
            c_in = graph.layer(layer.inputs[0]).shape[0]
            shapes[layer.id] = (layer.shape[0], c_in)
    return shapes


def init_params(model: ModelGraph | SequentialModel, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    return {
        lid: rng.normal(0.0, np.sqrt(2.0 / shape[1]), size=shape)
        for lid, shape in sorted(param_shapes(model).items())
    }


def random_batch(model: ModelGraph | SequentialModel, n: int, seed: int) -> tuple[np.ndarray, LossSpec]:
    graph = _graph(model)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, *graph.source.shape))
    t = rng.normal(size=(n, *graph.layer(graph.output_id).shape))
    return x, LossSpec(t)


def _spatial_axes(x: np.ndarray) -> range:
    return range(2, x.ndim)


def _corners(ndim: int):
    return itertools.product((0, 1), repeat=ndim)


def _pool(x: np.ndarray) -> np.ndarray:
    nsp = x.ndim - 2
    out = None
    for corner in _corners(nsp):
        part = x[(slice(None), slice(None), *(slice(c, None, 2) for c in corner))]
        out = part.copy() if out is None else out + part
    return out * (1.0 / 2**nsp)


def _unpool_grad(g: np.ndarray) -> np.ndarray:
    nsp = g.ndim - 2
    out = np.empty((*g.shape[:2], *(2 * v for v in g.shape[2:])))
    scaled = g * (1.0 / 2**nsp)
    for corner in _corners(nsp):
        out[(slice(None), slice(None), *(slice(c, None, 2) for c in corner))] = scaled
    return out


def _upsample(x: np.ndarray) -> np.ndarray:
    for axis in _spatial_axes(x):
        x = np.repeat(x, 2, axis=axis)
    return x


def _upsample_grad(g: np.ndarray) -> np.ndarray:
    out = None
    for corner in _corners(g.ndim - 2):
        part = g[(slice(None), slice(None), *(slice(c, None, 2) for c in corner))]
        out = part.copy() if out is None else out + part
    return out


def _forward_layer(layer, xs: list[np.ndarray], params: Params) -> np.ndarray:
    kind = layer.kind
    if kind in ("source", "sink", "passthrough"):
        return xs[0]
    if kind == "affine":
        w = params[layer.id]
        x = xs[0]
        if x.shape[1] != w.shape[1]:
            raise ShapeError(layer.id, f"expects {w.shape[1]} input channels, got {x.shape[1]}")
        # one product per item: identical shapes give identical rounding however the batch is split
        y = np.empty((x.shape[0], w.shape[0], *x.shape[2:]))
        for b in range(x.shape[0]):
            y[b] = (w @ x[b].reshape(w.shape[1], -1)).reshape(y.shape[1:])
        return y
    if kind == "relu":
        return np.maximum(xs[0], 0.0)
    if kind == "downsample2x":
        if any(v % 2 for v in xs[0].shape[2:]):
            raise ShapeError(layer.id, f"cannot halve odd spatial shape {xs[0].shape[2:]}")
        return _pool(xs[0])
    if kind == "upsample2x":
        return _upsample(xs[0])
    if kind == "concat":
        spatial = {x.shape[2:] for x in xs}
        if len(spatial) != 1:
            raise ShapeError(layer.id, f"concat inputs disagree on spatial shape: {sorted(spatial)}")
        return np.concatenate(xs, axis=1)
    if kind == "slice":
        lo, hi = layer.span
        return xs[0][:, lo:hi]
    raise ShapeError(layer.id, f"unsupported kind {kind!r}")


def _backward_layer(layer, xs, y, gy, params) -> tuple[list[np.ndarray], np.ndarray | None]:
    kind = layer.kind
    if kind in ("source", "sink", "passthrough"):
        return [gy], None
    if kind == "affine":
        w = params[layer.id]
        x = xs[0]
        gx = np.empty_like(x)
        dw = np.zeros_like(w)
        for b in range(x.shape[0]):
            g2 = gy[b].reshape(w.shape[0], -1)
            x2 = x[b].reshape(w.shape[1], -1)
            dw += g2 @ x2.T
            gx[b] = (w.T @ g2).reshape(x.shape[1:])
        return [gx], dw
    if kind == "relu":
        return [gy * (xs[0] > 0)], None
    if kind == "downsample2x":
        return [_unpool_grad(gy)], None
    if kind == "upsample2x":
        return [_upsample_grad(gy)], None
    if kind == "concat":
        out, start = [], 0
        for x in xs:
            out.append(gy[:, start : start + x.shape[1]])
            start += x.shape[1]
        return out, None
    if kind == "slice":
        lo, hi = layer.span
        gx = np.zeros_like(xs[0])
        gx[:, lo:hi] = gy
        return [gx], None
    raise ShapeError(layer.id, f"unsupported kind {kind!r}")


def _check_input(graph: ModelGraph, x: np.ndarray) -> None:
    src = graph.source
    if tuple(x.shape[1:]) != tuple(src.shape):
        raise ShapeError(src.id, f"input shape {tuple(x.shape[1:])} does not match {tuple(src.shape)}")


def _check_output(graph: ModelGraph, layer_id: int, y: np.ndarray) -> None:
    layer = graph.layer(layer_id)
    if layer.shape and tuple(y.shape[1:]) != tuple(layer.shape):
        raise ShapeError(layer_id, f"produced {tuple(y.shape[1:])}, declared {tuple(layer.shape)}")


def _accumulate(store: dict, key, value: np.ndarray) -> None:
    store[key] = value if key not in store else store[key] + value


# -- graph execution -------------------------------------------------------------


def _graph_forward(graph: ModelGraph, params: Params, x: np.ndarray):
    _check_input(graph, x)
    cache: dict[int, np.ndarray] = {}
    for layer in graph.layers:
        xs = [cache[u] for u in layer.inputs] if layer.inputs else [x]
        cache[layer.id] = _forward_layer(layer, xs, params)
        _check_output(graph, layer.id, cache[layer.id])
    return cache[graph.output_id], cache


def _graph_backward(graph: ModelGraph, params: Params, x, cache, gy) -> GradientSet:
    grads: dict[int, np.ndarray] = {graph.output_id: gy}
    dws: dict[int, np.ndarray] = {}
    for layer in reversed(graph.layers):
        if layer.id not in grads:
            continue
        xs = [cache[u] for u in layer.inputs] if layer.inputs else [x]
        gxs, dw = _backward_layer(layer, xs, cache[layer.id], grads.pop(layer.id), params)
        if dw is not None:
            dws[layer.id] = dw
        for u, g in zip(layer.inputs, gxs):
            _accumulate(grads, u, g)
    return GradientSet(dict(sorted(dws.items())))


# -- cell execution ---------------------------------------------------------------


def _cell_sources(seq: SequentialModel, pos: int) -> dict[int, str]:
    """Map each out-of-cell layer id this cell reads to the slot carrying it."""
    cell = seq.cells[pos]
    out = {}
    if pos > 0 and MAIN in cell.consumes_slots:
        out[seq.cells[pos - 1].body[-1]] = MAIN
    for name in cell.consumes_slots:
        if name != MAIN:
            out[seq.slot_sources[name]] = name
    return out


def cell_forward(seq: SequentialModel, pos: int, params: Params, slots: Mapping[str, np.ndarray], x=None):
    """Run one cell; returns outgoing slots and the cache needed for its backward."""
    cell = seq.cells[pos]
    graph = seq.graph
    incoming = _cell_sources(seq, pos)
    env: dict[int, np.ndarray] = {lid: slots[name] for lid, name in incoming.items()}
    local: dict[int, np.ndarray] = {}
    for lid in cell.body:
        layer = graph.layer(lid)
        if layer.kind == "source":
            _check_input(graph, x)
            xs = [x]
        else:
            xs = [local[u] if u in local else env[u] for u in layer.inputs]
        local[lid] = _forward_layer(layer, xs, params)
        _check_output(graph, lid, local[lid])
    out = {MAIN: local[cell.body[-1]]}
    for name in cell.produces_slots:
        if name != MAIN:
            out[name] = local[seq.slot_sources[name]]
    for name in cell.passthrough_slots:
        out[name] = slots[name]
    return out, (env, local, x)


def cell_backward(seq: SequentialModel, pos: int, params: Params, cache, grads_out: Mapping[str, np.ndarray]):
    """Reverse of :func:`cell_forward`: gradients for incoming slots and the cell's weights."""
    cell = seq.cells[pos]
    graph = seq.graph
    env, local, x = cache
    incoming = _cell_sources(seq, pos)
    g_local: dict[int, np.ndarray] = {}
    g_in: dict[str, np.ndarray] = {}
    for name in cell.passthrough_slots:
        if name in grads_out:
            g_in[name] = grads_out[name]
    if MAIN in grads_out:
        _accumulate(g_local, cell.body[-1], grads_out[MAIN])
    for name in cell.produces_slots:
        if name != MAIN and name in grads_out:
            _accumulate(g_local, seq.slot_sources[name], grads_out[name])
    dws: dict[int, np.ndarray] = {}
    for lid in reversed(cell.body):
        if lid not in g_local:
            continue
        layer = graph.layer(lid)
        if layer.kind == "source":
            xs = [x]
        else:
            xs = [local[u] if u in local else env[u] for u in layer.inputs]
        gxs, dw = _backward_layer(layer, xs, local[lid], g_local.pop(lid), params)
        if dw is not None:
            dws[lid] = dw
        for u, g in zip(layer.inputs, gxs):
            if u in local:
                _accumulate(g_local, u, g)
            else:
                _accumulate(g_in, incoming[u], g)
    return g_in, dws


def _seq_forward(seq: SequentialModel, params: Params, x: np.ndarray, cells: range | None = None, slots=None):
    cells = range(len(seq.cells)) if cells is None else cells
    slots = {} if slots is None else slots
    caches = {}
    for pos in cells:
        slots, caches[pos] = cell_forward(seq, pos, params, slots, x if pos == 0 else None)
    return slots, caches


def _seq_backward(seq: SequentialModel, params: Params, caches, grads, cells: range | None = None):
    cells = range(len(seq.cells)) if cells is None else cells
    dws: dict[int, np.ndarray] = {}
    for pos in reversed(cells):
        grads, cell_dws = cell_backward(seq, pos, params, caches[pos], grads)
        dws.update(cell_dws)
    return grads, dws


# -- public operations --------------------------------------------------------------


def forward_serial(model: ModelGraph | SequentialModel, x: np.ndarray, params: Params):
    """Evaluate the whole model on ``x``; returns ``(output, cache)``."""
    if isinstance(model, SequentialModel):
        slots, caches = _seq_forward(model, params, x)
        return slots[MAIN], caches
    return _graph_forward(model, params, x)


def backward_serial(model: ModelGraph | SequentialModel, x: np.ndarray, loss: LossSpec, params: Params) -> GradientSet:
    if isinstance(model, SequentialModel):
        slots, caches = _seq_forward(model, params, x)
        _, dws = _seq_backward(model, params, caches, {MAIN: loss.grad(slots[MAIN])})
        return GradientSet(dict(sorted(dws.items())))
    y, cache = _graph_forward(model, params, x)
    return _graph_backward(model, params, x, cache, loss.grad(y))


def loss_value(model: ModelGraph | SequentialModel, x: np.ndarray, loss: LossSpec, params: Params) -> float:
    y, _ = forward_serial(model, x, params)
    return loss.value(y)


def check_grad_finite_difference(
    model: ModelGraph | SequentialModel,
    x: np.ndarray,
    loss: LossSpec,
    params: Params,
    epsilon: float = 1e-5,
) -> float:
    """Worst max-norm relative deviation between reverse-mode and central-difference gradients."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    analytic = backward_serial(model, x, loss, params)
    worst = 0.0
    for lid, grad in analytic.grads.items():
        w = params[lid]
        numeric = np.empty_like(w)
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + epsilon
            plus = loss_value(model, x, loss, params)
            w[idx] = orig - epsilon
            minus = loss_value(model, x, loss, params)
            w[idx] = orig
            numeric[idx] = (plus - minus) / (2 * epsilon)
        worst = max(worst, relative_error(grad, numeric))
    return worst


def relu_margin(model: ModelGraph | SequentialModel, x: np.ndarray, params: Params) -> float:
    """Smallest ``|z|`` over all relu inputs; small values mean a nearby kink."""
    graph = _graph(model)
    _, cache = _graph_forward(graph, params, x)
    margins = [
        float(np.min(np.abs(cache[layer.inputs[0]])))
        for layer in graph.layers
        if layer.kind == "relu"
    ]
    return min(margins, default=float("inf"))


@dataclass
class PipelineResult:
    output: np.ndarray
    grads: GradientSet
    timeline: Timeline
    loss: float


class _Clock:
    def __init__(self):
        self._lock = threading.Lock()
        self._next = 0

    def tick(self) -> int:
        with self._lock:
            self._next += 1
            return self._next


def run_pipeline(
    seq: SequentialModel,
    partition: Partition,
    x: np.ndarray,
    cfg: ScheduleConfig,
    params: Params,
    loss: LossSpec,
    mode: str = "threads",
) -> PipelineResult:
    """Execute GPipe-style: split ``x`` into ``cfg.m`` micro-batches and pipeline them over stages.

    In ``threads`` mode each stage is a worker thread that talks only to its
    neighbours through FIFO queues; ``reference`` mode runs the same stage
    steps in a single thread. Weight gradients are summed over micro-batches
    in index order after every backward has finished, so both modes agree
    bit for bit. Event times in the returned timeline are logical ticks.
    """
    if partition.n_cells != len(seq.cells):
        raise ValueError(f"partition covers {partition.n_cells} cells, model has {len(seq.cells)}")
    if partition.k != cfg.k:
        raise ValueError(f"partition has {partition.k} stages but k={cfg.k}")
    n = x.shape[0]
    if n % cfg.m:
        raise ValueError(f"batch of {n} items cannot be split into {cfg.m} equal micro-batches")
    size = n // cfg.m
    micro_x = [x[j * size : (j + 1) * size] for j in range(cfg.m)]
    micro_loss = [loss.slice(j * size, (j + 1) * size) for j in range(cfg.m)]
    ranges = partition.stage_ranges()
    k, m = partition.k, cfg.m
    clock = _Clock()
    events: list[list[Event]] = [[] for _ in range(k)]
    outputs: list[np.ndarray | None] = [None] * m
    per_micro: list[list[dict[int, np.ndarray]]] = [[{} for _ in range(m)] for _ in range(k)]
    caches: list[dict[int, object]] = [{} for _ in range(k)]

    def forward_step(s: int, j: int, slots):
        start = clock.tick()
        out, caches[s][j] = _seq_forward(seq, params, micro_x[j] if s == 0 else None, ranges[s], slots)
        events[s].append(Event(s, start, clock.tick(), "forward", j, s))
        if s == k - 1:
            outputs[j] = out[MAIN]
        return out

    def backward_step(s: int, j: int, grads):
        start = clock.tick()
        if s == k - 1:
            grads = {MAIN: micro_loss[j].grad(outputs[j])}
        g_in, dws = _seq_backward(seq, params, caches[s].pop(j), grads, ranges[s])
        per_micro[s][j] = dws
        events[s].append(Event(s, start, clock.tick(), "backward", j, s))
        return g_in

    if mode == "reference":
        for j in range(m):
            slots = {}
            for s in range(k):
                slots = forward_step(s, j, slots)
        for j in reversed(range(m)):
            grads = {}
            for s in reversed(range(k)):
                grads = backward_step(s, j, grads)
    elif mode == "threads":
        fwd_q = [queue.Queue() for _ in range(k + 1)]
        bwd_q = [queue.Queue() for _ in range(k + 1)]
        barrier = threading.Barrier(k)
        errors: list[BaseException] = []

        def worker(s: int):
            try:
                for j in range(m):
                    slots = fwd_q[s].get() if s > 0 else {}
                    fwd_q[s + 1].put(forward_step(s, j, slots))
                barrier.wait()
                for j in reversed(range(m)):
                    grads = bwd_q[s + 1].get() if s < k - 1 else {}
                    bwd_q[s].put(backward_step(s, j, grads))
            except BaseException as exc:  # surfaced after join
                errors.append(exc)
                barrier.abort()
                for q in (*fwd_q, *bwd_q):
                    q.put(None)

        threads = [threading.Thread(target=worker, args=(s,), daemon=True) for s in range(k)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
    else:
        raise ValueError(f"unknown mode {mode!r}")

    grads: dict[int, np.ndarray] = {}
    for s in range(k):
        for j in range(m):
            for lid, dw in per_micro[s][j].items():
                _accumulate(grads, lid, dw)
    output = np.concatenate(outputs, axis=0)
    timeline = Timeline(tuple(sorted((e for evs in events for e in evs), key=lambda e: e.start)))
    return PipelineResult(output, GradientSet(dict(sorted(grads.items()))), timeline, loss.value(output))


# -- tensor fixtures ------------------------------------------------------------------


def format_tensor(t: np.ndarray) -> str:
    lines = ["shape: " + " ".join(str(v) for v in t.shape)]
    lines.append(" ".join(repr(float(v)) for v in np.ravel(t)))
    return "\n".join(lines) + "\n"


def parse_tensor(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("shape:"):
        raise ValueError("tensor fixture must start with a 'shape:' line")
    shape = tuple(int(v) for v in lines[0][len("shape:") :].split())
    values = np.array([float(v) for ln in lines[1:] for v in ln.split()], dtype=np.float64)
    expected = int(np.prod(shape)) if shape else 1
    if values.size != expected:
        raise ValueError(f"shape {shape} needs {expected} values, found {values.size}")
    if not np.all(np.isfinite(values)):
        raise ValueError("tensor fixture contains non-finite values")
    return values.reshape(shape)
