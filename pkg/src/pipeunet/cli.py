"""Command-line front end: build, transform, partition, simulate, verify, plan, report.

Exit codes: 0 success, 1 validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .curriculum import default_plan
from .executor import (
    backward_serial,
    forward_serial,
    init_params,
    random_batch,
    relative_error,
    run_pipeline,
)
from .io import (
    FormatError,
    Scenario,
    format_graph,
    format_plan,
    format_sequential,
    format_timeline,
    load_json,
    parse_graph,
    parse_model_spec,
    read_text,
)
from .ir import build_unet, total_cost, validate_graph
from .partition import OBJECTIVES, Partition, partition_balanced
from .scenarios import ScenarioResult, load_model, load_scenario, run_scenario, scenario_config
from .sequentialize import SequentialModel, chain_violations, passthrough_memory_overhead, sequentialize
from .sim import (
    ScheduleConfig,
    gpipe_dependency_violations,
    round_completions,
    simulate_gpipe,
    timeline_violations,
    windowed_throughput,
)

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
VERIFY_TOLERANCE = 1e-9


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    inputs: dict[str, str]
    seed: int | None
    version: str
    outputs: dict[str, str] = field(default_factory=dict)
    exit_code: int = 0
    timestamp: str = ""  # the only field that changes between identical reruns

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


class Run:
    """Collects outputs of one command and writes them with a manifest."""

    def __init__(self, args: argparse.Namespace, argv: list[str]):
        self.args = args
        self.manifest = RunManifest(
            command=args.command,
            argv=list(argv),
            inputs={},
            seed=getattr(args, "seed", None),
            version=__version__,
        )
        self.lines: list[tuple[str, object]] = []

    def read(self, path: str | Path) -> str:
        text = read_text(path)
        self.manifest.inputs[str(path)] = sha256_bytes(text.encode("utf-8"))
        return text

    def note(self, path: str | Path) -> None:
        self.manifest.inputs[str(path)] = sha256_file(path)

    def write(self, path: str | Path, text: str) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
        self.manifest.outputs[str(path)] = sha256_bytes(text.encode("utf-8"))

    def emit(self, key: str, value: object) -> None:
        self.lines.append((key, value))

    def render(self) -> str:
        if self.args.format == "machine":
            return "".join(f"{k}={_machine(v)}\n" for k, v in self.lines)
        width = max((len(k) for k, v in self.lines if v is not None), default=0)
        return "".join(k + "\n" if v is None else f"{k:<{width}}  {_human(v)}\n" for k, v in self.lines)

    def finish(self, code: int, stdout) -> None:
        text = self.render()
        stdout.write(text)
        self.manifest.outputs["<stdout>"] = sha256_bytes(text.encode("utf-8"))
        self.manifest.exit_code = code
        self.manifest.timestamp = datetime.now(timezone.utc).isoformat()
        target = self.args.manifest
        if target is None and getattr(self.args, "out", None):
            target = str(self.args.out) + ".manifest.json"
        if target:
            Path(target).parent.mkdir(parents=True, exist_ok=True)
            Path(target).write_text(self.manifest.to_json(), encoding="utf-8")
        else:
            sys.stderr.write(json.dumps(asdict(self.manifest), sort_keys=True) + "\n")


def _machine(v: object) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_machine(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _exp(v: float) -> str:
    """Compact exponent form: 1e-09 -> 1e-9."""
    mant, _, exp = f"{v:g}".partition("e")
    return f"{mant}e{int(exp)}" if exp else mant


def _human(v: object) -> str:
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_human(x) for x in v) + "]"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# -- commands ---------------------------------------------------------------------------------


def cmd_build(run: Run) -> int:
    args = run.args
    cfg = parse_model_spec(run.read(args.spec), args.spec)
    graph = build_unet(cfg)
    report = validate_graph(graph)
    totals = total_cost(graph)
    run.emit("layers", len(graph.layers))
    run.emit("compute", totals.compute)
    run.emit("params", totals.params)
    run.emit("activations", totals.activations)
    run.emit("violations", len(report.violations))
    if args.out:
        run.write(args.out, format_graph(graph))
    for v in report.violations:
        run.emit("violation", f"{v.kind} layer {v.layer_id}: {v.message}")
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_transform(run: Run) -> int:
    args = run.args
    graph = parse_graph(run.read(args.graph), args.graph)
    report = validate_graph(graph)
    if not report.ok:
        for v in report.violations:
            run.emit("violation", f"{v.kind} layer {v.layer_id}: {v.message}")
        return EXIT_INVALID
    seq = sequentialize(graph)
    problems = chain_violations(seq)
    run.emit("cells", len(seq.cells))
    run.emit("slots", len(seq.slot_sizes))
    run.emit("passthrough_overhead", passthrough_memory_overhead(seq))
    run.emit("chain_violations", len(problems))
    if args.out:
        run.write(args.out, format_sequential(seq))
    return EXIT_OK if not problems else EXIT_INVALID


def _load_seq(run: Run, path: str) -> SequentialModel:
    run.read(path)
    model = load_model(Path(path))
    return model if isinstance(model, SequentialModel) else sequentialize(model)


def cmd_partition(run: Run) -> int:
    args = run.args
    seq = _load_seq(run, args.model)
    part = partition_balanced(seq, args.k, args.objective)
    run.emit("k", part.k)
    run.emit("boundaries", list(part.boundaries))
    run.emit("bottleneck", part.bottleneck)
    run.emit("stage_costs", list(part.stage_costs))
    run.emit("stage_params", list(part.stage_params))
    run.emit("stage_activations", list(part.stage_activations))
    if args.out:
        data = part.to_dict()
        data["objective"] = args.objective
        run.write(args.out, json.dumps(data, indent=2) + "\n")
    return EXIT_OK


def _scenario_from_args(run: Run) -> tuple[Scenario, object]:
    """Resolve the simulate target into a scenario plus an optional preloaded model or partition."""
    args = run.args
    target = Path(args.target)
    text = run.read(target)
    preload = None
    if target.suffix == ".json":
        data = load_json(text, str(target))
        if "boundaries" in data:
            preload = Partition.from_dict(data)
            sc = Scenario(devices=preload.k, model_ref="")
        else:
            sc = load_scenario(target)
    else:
        sc = Scenario(devices=args.k or 1, model_ref=str(target))
    if args.scenario:
        run.read(args.scenario)
        sc = load_scenario(args.scenario)
        if target.suffix != ".json":
            sc.model_ref = str(target.resolve())
    overrides = {
        "devices": args.k,
        "micro_batches": args.micro_batches,
        "batch_size": args.batch_size,
        "backward_ratio": args.backward_ratio,
        "barrier": args.barrier,
        "repeat": args.repeat,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(sc, key, value)
    if args.micro_batches is not None and args.batch_size is None:
        sc.batch_size = max(sc.batch_size or 0, sc.micro_batches)
        if sc.batch_size % sc.micro_batches:
            sc.batch_size = sc.micro_batches
    if sc.model_ref and not isinstance(preload, Partition):
        run.note(sc.model_path())
    return sc, preload


def cmd_simulate(run: Run) -> int:
    sc, preload = _scenario_from_args(run)
    if isinstance(preload, Partition):
        if preload.k != sc.devices:
            raise ValueError(f"partition has {preload.k} stages but --k is {sc.devices}")
        cfg = scenario_config(sc)
        timeline, metrics = simulate_gpipe(preload, cfg)
        steady = windowed_throughput(round_completions(timeline), cfg.k) if cfg.repeat_batches >= 8 else None
        result = ScenarioResult(sc, timeline, metrics, steady, preload)
    else:
        result = run_scenario(sc)
    m = result.metrics
    problems = timeline_violations(result.timeline)
    if sc.schedule == "gpipe":
        problems += gpipe_dependency_violations(result.timeline, sc.devices, sc.micro_batches, sc.barrier)
    run.emit("schedule", sc.schedule)
    run.emit("devices", sc.devices)
    run.emit("micro_batches", sc.micro_batches)
    run.emit("repeat", sc.repeat)
    run.emit("makespan", m.makespan)
    if result.steady_throughput is not None:
        run.emit("throughput", float(f"{result.steady_throughput:.12g}"))
    else:
        run.emit("throughput", float(f"{m.throughput:.12g}"))
    run.emit("utilization", m.utilization)
    run.emit("bubble_fraction", m.bubble_fraction)
    run.emit("peak_memory", list(m.per_device_peak_memory))
    if result.partition is not None:
        run.emit("bottleneck", result.partition.bottleneck)
    run.emit("timeline_violations", len(problems))
    if run.args.out:
        run.write(run.args.out, format_timeline(result.timeline))
        summary = {
            "schedule": sc.schedule,
            "devices": sc.devices,
            "throughput": result.steady_throughput if result.steady_throughput is not None else m.throughput,
            "steady_state": result.steady_throughput is not None,
            "metrics": m.to_dict(),
            "bottleneck": result.partition.bottleneck if result.partition is not None else None,
        }
        run.write(str(run.args.out) + ".metrics.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if not problems else EXIT_INVALID


def cmd_verify(run: Run) -> int:
    args = run.args
    seq = _load_seq(run, args.model)
    part = Partition.from_dict(json.loads(run.read(args.partition)))
    m = args.micro_batches or 1
    n = args.batch_size or m
    cfg = ScheduleConfig(k=part.k, m=m, n=n)
    params = init_params(seq, args.seed)
    x, loss = random_batch(seq, n, args.seed + 1)
    y_serial, _ = forward_serial(seq.graph, x, params)
    g_serial = backward_serial(seq.graph, x, loss, params)
    result = run_pipeline(seq, part, x, cfg, params, loss)
    err = g_serial.max_relative_error(result.grads)
    same_out = bool(np.array_equal(result.output, y_serial))
    out_err = relative_error(result.output, y_serial)
    problems = timeline_violations(result.timeline) + gpipe_dependency_violations(result.timeline, part.k, m)
    ok = err < VERIFY_TOLERANCE and same_out and not problems
    run.emit("k", part.k)
    run.emit("micro_batches", m)
    run.emit("batch_size", n)
    run.emit("seed", args.seed)
    run.emit("max_rel_err", err)
    run.emit("output_bit_identical", same_out)
    run.emit("output_rel_err", out_err)
    run.emit("schedule_violations", len(problems))
    verdict = "PASS" if ok else "FAIL"
    relation = "<" if err < VERIFY_TOLERANCE else ">="
    run.emit("result", f"{verdict} max_rel_err {relation} {_exp(VERIFY_TOLERANCE)}")
    if args.out:
        report = {
            "pass": ok,
            "max_rel_err": err,
            "output_bit_identical": same_out,
            "schedule_violations": problems,
            "k": part.k,
            "micro_batches": m,
            "batch_size": n,
            "seed": args.seed,
        }
        run.write(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if ok else EXIT_INVALID


def cmd_plan(run: Run) -> int:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plan = default_plan(run.args.shape)
    for i, s in enumerate(plan.stages, start=1):
        run.emit(
            f"stage{i}",
            f"patch={'x'.join(map(str, s.patch_size))} batch={s.batch_size} epochs={s.epochs} "
            f"lr={s.learning_rate:g} optimizer={s.optimizer} sampling={s.sampling}",
        )
    for note in plan.notes:
        run.emit("flag", note)
    if run.args.out:
        run.write(run.args.out, format_plan(plan))
    return EXIT_OK


def cmd_report(run: Run) -> int:
    rows = []
    for path in run.args.artifacts:
        data = load_json(run.read(path), path)
        name = Path(path).name
        if "metrics" in data:
            metrics = data["metrics"]
            peak = max(metrics["per_device_peak_memory"], default=0)
            rows.append((name, data["throughput"], peak, data.get("bottleneck"), metrics["utilization"]))
        elif "boundaries" in data:
            rows.append((name, None, None, data["bottleneck"], None))
        elif "max_rel_err" in data:
            run.emit(f"{name}.verify", "PASS" if data["pass"] else "FAIL")
            continue
        else:
            raise FormatError("not a metrics, partition, or verify artifact", path=path)
    if run.args.format == "machine":
        for name, thr, peak, bott, util in rows:
            run.emit(f"{name}.throughput", "-" if thr is None else thr)
            run.emit(f"{name}.peak_memory", "-" if peak is None else peak)
            run.emit(f"{name}.bottleneck", "-" if bott is None else bott)
            run.emit(f"{name}.utilization", "-" if util is None else util)
        return EXIT_OK
    cell = lambda v: "-" if v is None else _human(v)  # noqa: E731
    header = ("artifact", "throughput", "peak_memory", "bottleneck", "utilization")
    table = [header] + [tuple(cell(v) if i else v for i, v in enumerate(r)) for r in rows]
    widths = [max(len(str(r[i])) for r in table) for i in range(len(header))]
    verdicts = run.lines
    run.lines = []
    for r in table:
        run.emit("  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip(), None)
    run.lines.extend(verdicts)
    return EXIT_OK


COMMANDS = {
    "build": cmd_build,
    "transform": cmd_transform,
    "partition": cmd_partition,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "plan": cmd_plan,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="primary output file")
    common.add_argument("--manifest", help="manifest path (default: <out>.manifest.json, else stderr)")
    common.add_argument("--format", choices=("table", "machine"), default="table")
    common.add_argument("--seed", type=int, default=0)

    parser = argparse.ArgumentParser(prog="pipeunet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", parents=[common], help="build a U-Net graph from a model-spec file")
    p.add_argument("spec")

    p = sub.add_parser("transform", parents=[common], help="sequentialize a graph file")
    p.add_argument("graph")

    p = sub.add_parser("partition", parents=[common], help="balanced contiguous partition")
    p.add_argument("model", help="sequential-model or graph file")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--objective", choices=OBJECTIVES, default="compute")

    p = sub.add_parser("simulate", parents=[common], help="simulate a scenario, partition or model")
    p.add_argument("target", help="scenario JSON, partition JSON, or graph/sequential-model file")
    p.add_argument("--scenario", help="scenario JSON applied to a model target")
    p.add_argument("--k", type=int)
    p.add_argument("--micro-batches", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--backward-ratio", type=float)
    p.add_argument("--barrier", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--repeat", type=int)

    p = sub.add_parser("verify", parents=[common], help="pipeline vs serial gradient equivalence")
    p.add_argument("model", help="sequential-model or graph file")
    p.add_argument("partition", help="partition JSON")
    p.add_argument("--micro-batches", type=int)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("plan", parents=[common], help="patch-size curriculum plan")
    p.add_argument("--shape", type=int, nargs=3, required=True, metavar=("X", "Y", "Z"))

    p = sub.add_parser("report", parents=[common], help="consolidated table over artifacts")
    p.add_argument("artifacts", nargs="+")
    return parser


def main(argv: list[str] | None = None, stdout=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    stdout = stdout or sys.stdout
    args = build_parser().parse_args(argv)
    run = Run(args, argv)
    try:
        code = COMMANDS[args.command](run)
    except OSError as exc:
        run.emit("error", f"I/O: {exc}")
        code = EXIT_IO
    except (FormatError, ValueError) as exc:
        run.emit("error", str(exc))
        code = EXIT_INVALID
    try:
        run.finish(code, stdout)
    except OSError as exc:
        sys.stderr.write(f"error: cannot write manifest: {exc}\n")
        return EXIT_IO
    return code


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
