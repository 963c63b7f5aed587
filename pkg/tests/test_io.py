import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipeunet.io import (
    FormatError,
    format_graph,
    format_model_spec,
    format_sequential,
    format_timeline,
    parse_graph,
    parse_model_spec,
    parse_scenario,
    parse_sequential,
    parse_timeline,
)
from pipeunet.ir import UNetConfig, build_unet, chain_graph
from pipeunet.partition import partition_balanced
from pipeunet.scenarios import data_path, load_model, skip_pair_graph
from pipeunet.sequentialize import sequentialize
from pipeunet.sim import ScheduleConfig, simulate_gpipe


def _events(tl):
    return sorted(tl.events, key=lambda e: (e.start, e.device, e.phase, e.micro_batch, e.stage))


@settings(max_examples=15)
@given(st.integers(2, 4), st.integers(2, 3), st.integers(1, 2))
def test_graph_and_sequential_roundtrip(base, blocks, channels):
    g = build_unet(UNetConfig(base, blocks, (channels, *(2**blocks,) * 3)))
    assert parse_graph(format_graph(g)) == g
    seq = sequentialize(g)
    again = parse_sequential(format_sequential(seq))
    assert again.graph == g
    assert again.cells == seq.cells
    assert again.slot_sizes == seq.slot_sizes and again.slot_sources == seq.slot_sources


def test_shipped_skip_pair_graph_matches_builder():
    assert load_model(data_path("skip_pair.graph")) == skip_pair_graph()


def test_fractional_costs_roundtrip():
    g = chain_graph([0.1, 1 / 3, 2.5])
    assert parse_graph(format_graph(g)) == g


def test_timeline_roundtrip():
    part = partition_balanced(sequentialize(chain_graph([1, 2, 3, 1])), 3)
    tl, _ = simulate_gpipe(part, ScheduleConfig(k=3, m=4, n=4, repeat_batches=2))
    assert _events(parse_timeline(format_timeline(tl))) == _events(tl)


def test_graph_errors_carry_line():
    text = "# output 1\n0 source 0\n1 widget 1 0\n"
    with pytest.raises(FormatError) as info:
        parse_graph(text)
    assert info.value.line == 3 and info.value.key == "kind"
    with pytest.raises(FormatError) as info:
        parse_graph("0 source 0 ; colour=red\n")
    assert info.value.key == "colour"
    with pytest.raises(FormatError):
        parse_graph("0 source x\n")
    with pytest.raises(FormatError):
        parse_graph("\n# nothing\n")


def test_sequential_errors():
    with pytest.raises(FormatError):
        parse_sequential("# sequential model\ncell 0 body=0\n")
    text = format_sequential(sequentialize(chain_graph([1, 1])))
    broken = text.replace("consumes=-", "", 1)
    with pytest.raises(FormatError) as info:
        parse_sequential(broken)
    assert info.value.key == "consumes"


def test_timeline_error():
    with pytest.raises(FormatError) as info:
        parse_timeline("# header\n0 0 1 sideways 0 0 0\n")
    assert info.value.line == 2


def test_model_spec_roundtrip_and_defaults():
    cfg = UNetConfig(16, 3, (1, 32, 32, 32))
    assert parse_model_spec(format_model_spec(cfg)) == cfg
    assert parse_model_spec('{"base_filters": 8, "input_shape": [1, 32, 32, 32]}').encoder_blocks == 5


@pytest.mark.parametrize(
    "text, key, line",
    [
        ('{\n  "base_filters": 8,\n  "input_shape": [1, 8, 8, 8],\n  "colour": 1\n}', "colour", 4),
        ('{\n  "base_filters": -1,\n  "input_shape": [1, 8, 8, 8]\n}', "base_filters", 2),
        ('{\n  "base_filters": 8,\n  "input_shape": [1, 8, 8]\n}', "input_shape", 3),
        ('{\n  "base_filters": true,\n  "input_shape": [1, 8, 8, 8]\n}', "base_filters", 2),
        ('{\n  "input_shape": [1, 8, 8, 8]\n}', "base_filters", None),
    ],
)
def test_model_spec_errors_name_key(text, key, line):
    with pytest.raises(FormatError) as info:
        parse_model_spec(text, "m.json")
    assert info.value.key == key and info.value.line == line
    assert key in str(info.value) and "m.json" in str(info.value)


def test_json_syntax_error_has_line():
    with pytest.raises(FormatError) as info:
        parse_model_spec('{\n  "base_filters": 8,\n  oops\n}')
    assert info.value.line == 3


def _scenario(**kw):
    base = {"devices": 3, "model_ref": "m.graph"}
    base.update(kw)
    return json.dumps(base, indent=2)


def test_scenario_defaults_and_shipped_files():
    sc = parse_scenario(_scenario(micro_batches=4))
    assert sc.batch_size == 4 and sc.schedule == "gpipe" and sc.placement == "balanced"
    conv = parse_scenario(data_path("conventional_3dev.json").read_text(), str(data_path("conventional_3dev.json")))
    assert conv.placement[0][-1] == 14 and conv.model_path() == data_path("skip_pair.graph")


@pytest.mark.parametrize(
    "kw, key",
    [
        ({"devices": 0}, "devices"),
        ({"micro_batches": 3, "batch_size": 4}, "batch_size"),
        ({"schedule": "1f1b"}, "schedule"),
        ({"placement": "random"}, "placement"),
        ({"placement": [1.5]}, "placement"),
        ({"barrier": "yes"}, "barrier"),
        ({"speed": 2}, "speed"),
    ],
)
def test_scenario_errors_name_key(kw, key):
    text = _scenario(**kw)
    with pytest.raises(FormatError) as info:
        parse_scenario(text)
    assert info.value.key == key
    assert info.value.line == next(i for i, ln in enumerate(text.splitlines(), 1) if f'"{key}"' in ln)
