"""Text formats: graph edge lists, sequential models, timelines, and JSON model/scenario/plan files."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .ir import LAYER_KINDS, LayerSpec, ModelGraph, UNetConfig
from .sequentialize import Cell, SequentialModel
from .sim import PHASES, Event, Timeline


class FormatError(ValueError):
    """Malformed input; carries the 1-based line number and offending key when known."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None, path: str | None = None):
        where = ""
        if path:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip())
        self.line = line
        self.key = key


# -- graph edge list ----------------------------------------------------------------------


def _fmt_num(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def format_graph(graph: ModelGraph) -> str:
    """One ``id kind cost inputs...`` record per layer, extra fields after ``;``."""
    lines = [f"# output {graph.output_id}", "# id kind cost inputs... ; name params activations shape block"]
    for l in graph.layers:
        head = " ".join([str(l.id), l.kind, _fmt_num(l.compute_cost), *map(str, l.inputs)])
        extras = [f"name={l.name}", f"params={l.param_count}", f"act={l.activation_elems}"]
        if l.shape:
            extras.append("shape=" + "x".join(map(str, l.shape)))
        if l.block:
            extras.append(f"block={l.block}")
        if l.span is not None:
            extras.append(f"span={l.span[0]},{l.span[1]}")
        lines.append(f"{head} ; {' '.join(extras)}")
    return "\n".join(lines) + "\n"


def parse_graph(text: str, path: str | None = None) -> ModelGraph:
    output_id = None
    layers: list[LayerSpec] = []
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = re.match(r"#\s*output\s+(-?\d+)\s*$", line)
            if m:
                output_id = int(m.group(1))
            continue
        head, _, tail = line.partition(";")
        parts = head.split()
        if len(parts) < 3:
            raise FormatError("expected 'id kind cost inputs...'", no, path=path)
        try:
            lid, kind, cost = int(parts[0]), parts[1], float(parts[2])
            inputs = tuple(int(v) for v in parts[3:])
        except ValueError as exc:
            raise FormatError(f"bad number in record: {exc}", no, path=path) from None
        if kind not in LAYER_KINDS:
            raise FormatError(f"unknown layer kind {kind!r}", no, key="kind", path=path)
        fields: dict[str, str] = {}
        for item in tail.split():
            key, eq, value = item.partition("=")
            if not eq:
                raise FormatError(f"expected key=value, got {item!r}", no, key=key, path=path)
            if key not in ("name", "params", "act", "shape", "block", "span"):
                raise FormatError(f"unknown field {key!r}", no, key=key, path=path)
            fields[key] = value
        try:
            layers.append(
                LayerSpec(
                    id=lid,
                    name=fields.get("name", f"layer{lid}"),
                    kind=kind,
                    compute_cost=cost,
                    param_count=int(fields.get("params", 0)),
                    activation_elems=int(fields.get("act", 0)),
                    inputs=inputs,
                    shape=tuple(int(v) for v in fields["shape"].split("x")) if "shape" in fields else (),
                    block=fields.get("block", ""),
                    span=tuple(int(v) for v in fields["span"].split(",")) if "span" in fields else None,
                )
            )
        except ValueError as exc:
            raise FormatError(str(exc), no, path=path) from None
    if not layers:
        raise FormatError("graph file has no layer records", path=path)
    if output_id is None:
        sinks = [l for l in layers if l.kind == "sink"]
        output_id = sinks[0].inputs[0] if sinks and sinks[0].inputs else layers[-1].id
    return ModelGraph(tuple(layers), output_id)


# -- sequential model ---------------------------------------------------------------------


def _names(values) -> str:
    return ",".join(values) if values else "-"


def _split(value: str) -> tuple[str, ...]:
    return () if value == "-" else tuple(value.split(","))


def format_sequential(seq: SequentialModel) -> str:
    """Cells, slots, then the underlying graph, in one self-contained file."""
    lines = ["# sequential model"]
    for name in sorted(seq.slot_sources, key=lambda s: int(s.split("_")[1])):
        lines.append(f"slot {name} source={seq.slot_sources[name]} size={seq.slot_sizes[name]}")
    for c in seq.cells:
        lines.append(
            f"cell {c.id} body={','.join(map(str, c.body))} consumes={_names(c.consumes_slots)} "
            f"produces={_names(c.produces_slots)} passthrough={_names(c.passthrough_slots)}"
        )
    lines.append("# graph")
    return "\n".join(lines) + "\n" + format_graph(seq.graph)


def parse_sequential(text: str, path: str | None = None) -> SequentialModel:
    lines = text.splitlines()
    try:
        split = next(i for i, ln in enumerate(lines) if ln.strip() == "# graph")
    except StopIteration:
        raise FormatError("missing '# graph' section", path=path) from None
    graph = parse_graph("\n".join([""] * (split + 1) + lines[split + 1 :]), path)
    cells, sizes, sources = [], {}, {}
    for no, raw in enumerate(lines[:split], start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        kind, *rest = line.split()
        try:
            if kind == "slot":
                kv = dict(item.split("=", 1) for item in rest[1:])
                sources[rest[0]] = int(kv["source"])
                sizes[rest[0]] = int(kv["size"])
            elif kind == "cell":
                kv = dict(item.split("=", 1) for item in rest[1:])
                cells.append(
                    Cell(
                        id=int(rest[0]),
                        body=tuple(int(v) for v in kv["body"].split(",")),
                        consumes_slots=_split(kv["consumes"]),
                        produces_slots=_split(kv["produces"]),
                        passthrough_slots=_split(kv["passthrough"]),
                    )
                )
            else:
                raise FormatError(f"unknown record {kind!r}", no, key=kind, path=path)
        except KeyError as exc:
            raise FormatError(f"missing field {exc.args[0]!r}", no, key=exc.args[0], path=path) from None
        except (ValueError, IndexError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed {kind} record: {exc}", no, path=path) from None
    return SequentialModel(graph, tuple(cells), sizes, sources)


# -- timeline -------------------------------------------------------------------------------


def format_timeline(timeline: Timeline) -> str:
    lines = ["# device start end phase stage micro round"]
    for e in sorted(timeline.events, key=lambda e: (e.start, e.device, e.phase, e.micro_batch, e.stage)):
        lines.append(
            f"{e.device} {_fmt_num(e.start)} {_fmt_num(e.end)} {e.phase} {e.stage} {e.micro_batch} {e.round}"
        )
    return "\n".join(lines) + "\n"


def parse_timeline(text: str) -> Timeline:
    events = []
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7 or parts[3] not in PHASES:
            raise FormatError("expected 'device start end phase stage micro round'", no)
        events.append(
            Event(int(parts[0]), float(parts[1]), float(parts[2]), parts[3], int(parts[5]), int(parts[4]), int(parts[6]))
        )
    return Timeline(tuple(events))


# -- JSON documents -------------------------------------------------------------------------


def _key_line(text: str, key: str) -> int | None:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def load_json(text: str, path: str | None = None) -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", exc.lineno, path=path) from None
    if not isinstance(data, dict):
        raise FormatError("top level must be an object", 1, path=path)
    return data


def _check_keys(data: dict, text: str, allowed: set[str], required: set[str], path: str | None) -> None:
    for key in data:
        if key not in allowed:
            raise FormatError(f"unknown key {key!r}", _key_line(text, key), key=key, path=path)
    for key in sorted(required - set(data)):
        raise FormatError(f"missing required key {key!r}", None, key=key, path=path)


def _typed(data: dict, text: str, key: str, kind, path: str | None, check=None, what: str = ""):
    value = data[key]
    ok = isinstance(value, kind) and not (kind is not bool and isinstance(value, bool))
    if ok and check is not None:
        ok = check(value)
    if not ok:
        raise FormatError(f"bad value for {key!r}: {value!r} ({what})", _key_line(text, key), key=key, path=path)
    return value


MODEL_KEYS = {"base_filters", "encoder_blocks", "input_shape", "se_blocks", "cost_model"}


def parse_model_spec(text: str, path: str | None = None) -> UNetConfig:
    data = load_json(text, path)
    _check_keys(data, text, MODEL_KEYS, {"base_filters", "input_shape"}, path)
    base = _typed(data, text, "base_filters", int, path, lambda v: v >= 1, "positive integer")
    blocks = 5
    if "encoder_blocks" in data:
        blocks = _typed(data, text, "encoder_blocks", int, path, lambda v: v >= 2, "integer >= 2")
    shape = _typed(
        data, text, "input_shape", list, path,
        lambda v: len(v) == 4 and all(isinstance(x, int) and not isinstance(x, bool) and x > 0 for x in v),
        "four positive integers (channels, x, y, z)",
    )
    se = _typed(data, text, "se_blocks", bool, path, what="boolean") if "se_blocks" in data else False
    cost_model = {}
    if "cost_model" in data:
        cost_model = _typed(
            data, text, "cost_model", dict, path,
            lambda v: all(k in LAYER_KINDS and isinstance(x, (int, float)) and x >= 0 for k, x in v.items()),
            "map of layer kind to non-negative multiplier",
        )
    try:
        return UNetConfig(base, blocks, tuple(shape), dict(cost_model), se)
    except ValueError as exc:
        raise FormatError(str(exc), path=path) from None


def format_model_spec(cfg: UNetConfig) -> str:
    return json.dumps(
        {
            "base_filters": cfg.base_filters,
            "encoder_blocks": cfg.encoder_blocks,
            "input_shape": list(cfg.input_shape),
            "se_blocks": cfg.se_blocks,
            "cost_model": dict(cfg.cost_model),
        },
        indent=2,
    ) + "\n"


SCENARIO_KEYS = {
    "devices", "micro_batches", "batch_size", "backward_ratio", "barrier", "repeat",
    "placement", "model_ref", "schedule", "time_unit", "comm_cost", "description",
}
SCHEDULES = ("gpipe", "dependency")


@dataclass
class Scenario:
    devices: int
    model_ref: str
    micro_batches: int = 1
    batch_size: int | None = None
    backward_ratio: float = 2.0
    barrier: bool = True
    repeat: int = 1
    placement: Any = "balanced"
    schedule: str = "gpipe"
    time_unit: float = 1.0
    comm_cost: float = 0.0
    description: str = ""
    base_dir: Path = field(default_factory=Path)

    def model_path(self) -> Path:
        p = Path(self.model_ref)
        return p if p.is_absolute() else self.base_dir / p


def parse_scenario(text: str, path: str | None = None) -> Scenario:
    data = load_json(text, path)
    _check_keys(data, text, SCENARIO_KEYS, {"devices", "model_ref"}, path)
    pos_int = lambda v: v >= 1  # noqa: E731
    nonneg = lambda v: v >= 0  # noqa: E731
    num = (int, float)
    sc = Scenario(
        devices=_typed(data, text, "devices", int, path, pos_int, "integer >= 1"),
        model_ref=_typed(data, text, "model_ref", str, path, what="path string"),
        base_dir=Path(path).parent if path else Path(),
    )
    if "micro_batches" in data:
        sc.micro_batches = _typed(data, text, "micro_batches", int, path, pos_int, "integer >= 1")
    if "batch_size" in data:
        sc.batch_size = _typed(data, text, "batch_size", int, path, pos_int, "integer >= 1")
    if "backward_ratio" in data:
        sc.backward_ratio = float(_typed(data, text, "backward_ratio", num, path, nonneg, "number >= 0"))
    if "barrier" in data:
        sc.barrier = _typed(data, text, "barrier", bool, path, what="boolean")
    if "repeat" in data:
        sc.repeat = _typed(data, text, "repeat", int, path, pos_int, "integer >= 1")
    if "schedule" in data:
        sc.schedule = _typed(data, text, "schedule", str, path, lambda v: v in SCHEDULES, f"one of {SCHEDULES}")
    if "time_unit" in data:
        sc.time_unit = float(_typed(data, text, "time_unit", num, path, lambda v: v > 0, "number > 0"))
    if "comm_cost" in data:
        sc.comm_cost = float(_typed(data, text, "comm_cost", num, path, nonneg, "number >= 0"))
    if "description" in data:
        sc.description = _typed(data, text, "description", str, path, what="string")
    if "placement" in data:
        sc.placement = _typed(
            data, text, "placement", (str, list, dict), path,
            lambda v: v in ("balanced", "conventional") if isinstance(v, str) else True,
            "'balanced', 'conventional', a boundary list, or a device -> layer ids map",
        )
        if isinstance(sc.placement, dict):
            try:
                sc.placement = {int(d): [int(i) for i in ids] for d, ids in sc.placement.items()}
            except (TypeError, ValueError):
                raise FormatError("placement map must be device -> list of layer ids",
                                  _key_line(text, "placement"), key="placement", path=path) from None
        elif isinstance(sc.placement, list) and not all(isinstance(b, int) for b in sc.placement):
            raise FormatError("placement boundaries must be integers",
                              _key_line(text, "placement"), key="placement", path=path)
    if sc.batch_size is None:
        sc.batch_size = sc.micro_batches
    if sc.batch_size % sc.micro_batches:
        raise FormatError(
            f"batch_size {sc.batch_size} is not divisible by micro_batches {sc.micro_batches}",
            _key_line(text, "batch_size"), key="batch_size", path=path,
        )
    return sc


def format_plan(plan) -> str:
    return json.dumps(plan.to_dict(), indent=2) + "\n"


def read_text(path: str | Path) -> str:
    return Path(path).read_text(encoding="utf-8")
