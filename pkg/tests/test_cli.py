import io
import json
from pathlib import Path

import pytest

from frozen import UNET32_PARAMS
from pipeunet.cli import EXIT_INVALID, EXIT_IO, EXIT_OK, main
from pipeunet.io import parse_graph
from pipeunet.ir import validate_graph
from pipeunet.scenarios import data_path


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], stdout=out)
    return code, out.getvalue()


def machine(text):
    return dict(line.split("=", 1) for line in text.splitlines())


@pytest.fixture
def small_spec(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps({"base_filters": 2, "encoder_blocks": 2, "input_shape": [1, 4, 4, 4]}))
    return p


def test_build_roundtrips_and_writes_manifest(tmp_path, small_spec):
    out = tmp_path / "g.graph"
    code, text = run("build", small_spec, "--out", out)
    assert code == EXIT_OK
    assert validate_graph(parse_graph(out.read_text())).ok
    manifest = json.loads(Path(str(out) + ".manifest.json").read_text())
    assert manifest["command"] == "build" and manifest["exit_code"] == 0
    assert str(small_spec) in manifest["inputs"] and str(out) in manifest["outputs"]
    assert "<stdout>" in manifest["outputs"] and manifest["timestamp"]


def test_build_unet32_param_total(tmp_path):
    code, text = run("build", data_path("unet32.json"), "--format", "machine", "--manifest", tmp_path / "m.json")
    assert code == EXIT_OK
    assert int(machine(text)["params"]) == UNET32_PARAMS


def test_malformed_key_exits_nonzero_naming_key(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "base_filters": 8,\n  "input_shape": [1, 8, 8, 8],\n  "filters": 3\n}\n')
    code, text = run("build", p, "--manifest", tmp_path / "m.json")
    assert code == EXIT_INVALID
    assert "'filters'" in text and ":4:" in text
    assert json.loads((tmp_path / "m.json").read_text())["exit_code"] == EXIT_INVALID


def test_missing_file_is_io_error(tmp_path):
    code, text = run("build", tmp_path / "nope.json", "--manifest", tmp_path / "m.json")
    assert code == EXIT_IO and "error" in text


def test_manifest_goes_to_stderr_without_out(capsys):
    code, _ = run("plan", "--shape", 192, 192, 192)
    assert code == EXIT_OK
    assert json.loads(capsys.readouterr().err)["command"] == "plan"


@pytest.mark.parametrize("name, expected", [("conventional_3dev.json", 0.5), ("sequential_3dev.json", 0.75)])
def test_simulate_shipped_scenarios(tmp_path, name, expected):
    out = tmp_path / "tl.txt"
    code, text = run("simulate", data_path(name), "--out", out, "--format", "machine")
    assert code == EXIT_OK
    values = machine(text)
    assert abs(float(values["throughput"]) - expected) <= 0.01
    assert values["timeline_violations"] == "0"
    metrics = json.loads(Path(str(out) + ".metrics.json").read_text())
    assert metrics["steady_state"] and abs(metrics["throughput"] - expected) <= 0.01
    code, table = run("simulate", data_path(name), "--manifest", tmp_path / "m2.json")
    assert f"throughput           {expected:g}" in table


def test_simulate_flag_overrides(tmp_path):
    code, text = run(
        "simulate", data_path("sequential_3dev.json"), "--micro-batches", 2, "--batch-size", 4, "--no-barrier",
        "--repeat", 1, "--backward-ratio", 2, "--format", "machine", "--manifest", tmp_path / "m.json",
    )
    assert code == EXIT_OK
    values = machine(text)
    assert values["micro_batches"] == "2" and values["repeat"] == "1"


def _pipeline(tmp_path, spec, k, m, seed=0):
    g, s, p, t, v = (tmp_path / n for n in ("g.graph", "s.seq", "p.json", "t.txt", "v.json"))
    assert run("build", spec, "--out", g)[0] == EXIT_OK
    assert run("transform", g, "--out", s)[0] == EXIT_OK
    assert run("partition", s, "--k", k, "--out", p)[0] == EXIT_OK
    code, sim = run("simulate", p, "--micro-batches", m, "--out", t, "--format", "machine")
    assert code == EXIT_OK and machine(sim)["timeline_violations"] == "0"
    code, text = run("verify", s, p, "--micro-batches", m, "--seed", seed, "--out", v)
    return code, text, (g, s, p, t, v)


def test_verify_k3_m4_passes(tmp_path, small_spec):
    code, text, _ = _pipeline(tmp_path, small_spec, 3, 4, seed=11)
    assert code == EXIT_OK
    assert "PASS max_rel_err < 1e-9" in text


def test_rerun_is_byte_identical(tmp_path, small_spec):
    first = _pipeline(tmp_path / "a", small_spec, 3, 2, seed=5)
    second = _pipeline(tmp_path / "b", small_spec, 3, 2, seed=5)
    assert first[1] == second[1]
    for a, b in zip(first[2], second[2]):
        assert a.read_bytes() == b.read_bytes()
        ma = json.loads(Path(str(a) + ".manifest.json").read_text())
        mb = json.loads(Path(str(b) + ".manifest.json").read_text())
        for m in (ma, mb):
            m.pop("timestamp")
            m["outputs"] = {Path(k).name: d for k, d in m["outputs"].items()}
            m["inputs"] = {Path(k).name: d for k, d in m["inputs"].items()}
            m["argv"] = [Path(x).name for x in m["argv"]]
        assert ma == mb


def test_report_table_and_machine(tmp_path, small_spec):
    _, _, (g, s, p, t, v) = _pipeline(tmp_path, small_spec, 2, 2)
    metrics = Path(str(t) + ".metrics.json")
    code, table = run("report", metrics, p, v, "--manifest", tmp_path / "m.json")
    assert code == EXIT_OK
    lines = table.splitlines()
    assert lines[0].split() == ["artifact", "throughput", "peak_memory", "bottleneck", "utilization"]
    assert all(line == line.rstrip() for line in lines)
    assert any(line.startswith("v.json.verify") and line.endswith("PASS") for line in lines)
    code, text = run("report", metrics, p, "--format", "machine", "--manifest", tmp_path / "m.json")
    values = machine(text)
    assert values["p.json.throughput"] == "-" and float(values["t.txt.metrics.json.throughput"]) > 0


def test_report_rejects_unknown_artifact(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{}")
    assert run("report", p, "--manifest", tmp_path / "m.json")[0] == EXIT_INVALID


def test_plan_writes_stage_keys(tmp_path):
    out = tmp_path / "plan.json"
    code, text = run("plan", "--shape", 64, 64, 64, "--out", out)
    assert code == EXIT_OK and "flag" in text
    stages = json.loads(out.read_text())["stages"]
    assert [s["patch"] for s in stages] == [[64, 64, 64]]
    assert set(stages[0]) >= {"patch", "batch", "epochs", "lr", "optimizer", "sampling"}


def test_end_to_end_default_unet32(tmp_path):
    code, text, _ = _pipeline(tmp_path, data_path("unet32.json"), 4, 2)
    assert code == EXIT_OK, text
    assert "PASS max_rel_err < 1e-9" in text
