import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weightstego.builder import GraphBuilder
from weightstego.errors import (
    BadMagic,
    CycleDetected,
    DanglingReference,
    InvariantViolation,
    MalformedHeader,
    MtarError,
    OverlappingTensors,
    UnsupportedVersion,
)
from weightstego.mtar import (
    GraphNode,
    ModelArchive,
    TensorSpec,
    parse_archive,
    topological_order,
    write_archive,
)

from conftest import minimal_archive, random_archive


def test_minimal_archive_parses():
    raw = write_archive(minimal_archive())
    m = parse_archive(raw)
    assert len(m.nodes) == 2
    assert len(m.tensors) == 2  # weight + bias
    assert m.node("fc").op == "Dense"
    assert m.tensor("fc.w").shape == (2, 2)


def test_bad_magic():
    raw = bytearray(write_archive(minimal_archive()))
    raw[:4] = b"MTAX"
    with pytest.raises(BadMagic):
        parse_archive(bytes(raw))


def test_unsupported_version():
    raw = bytearray(write_archive(minimal_archive()))
    struct.pack_into("<H", raw, 4, 9)
    with pytest.raises(UnsupportedVersion):
        parse_archive(bytes(raw))


def test_write_parse_write_is_identity():
    raw = write_archive(minimal_archive())
    assert write_archive(parse_archive(raw)) == raw


def test_structural_round_trip():
    m = minimal_archive()
    m2 = parse_archive(write_archive(m))
    assert m2.nodes == m.nodes
    assert m2.tensors == m.tensors
    assert m2.data == m.data
    assert m2.output == m.output


def test_serialization_deterministic():
    m = minimal_archive()
    assert write_archive(m) == write_archive(m)


def test_data_bytes_copied_verbatim():
    m = minimal_archive()
    patched = bytearray(m.data)
    patched[0] ^= 0xA5
    m2 = m.replace_data(bytes(patched))
    raw = write_archive(m2)
    assert parse_archive(raw).data == bytes(patched)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_archive_round_trips(seed):
    m = random_archive(np.random.default_rng(seed))
    raw = write_archive(m)
    assert write_archive(parse_archive(raw)) == raw
    m2 = parse_archive(raw)
    assert m2.nodes == m.nodes and m2.data == m.data


def _header_and_data(m):
    raw = write_archive(m)
    header_len = struct.unpack_from("<I", raw, 6)[0]
    header = json.loads(raw[10:10 + header_len])
    return header, m.data


def _rebuild(header, data):
    blob = json.dumps(header, separators=(",", ":")).encode()
    prefix = b"MTAR" + struct.pack("<HI", 1, len(blob))
    pad = (-(len(prefix) + len(blob))) % 4
    return prefix + blob + b"\x00" * pad + data


HEADER_MUTATIONS = [
    ("node op", lambda h: h["nodes"][1].__setitem__("op", "Bogus")),
    ("node name dup", lambda h: h["nodes"][1].__setitem__("name", "in")),
    ("node input dangling", lambda h: h["nodes"][1].__setitem__("inputs", ["ghost"])),
    ("node weight dangling", lambda h: h["nodes"][1].__setitem__("weight", "ghost")),
    ("node weight wrong role", lambda h: h["nodes"][1].__setitem__("weight", "fc.b")),
    ("tensor dtype", lambda h: h["tensors"][0].__setitem__("dtype", "f16")),
    ("tensor role", lambda h: h["tensors"][0].__setitem__("role", "mystery")),
    ("tensor shape zero", lambda h: h["tensors"][0].__setitem__("shape", [0, 2])),
    ("tensor shape rank", lambda h: h["tensors"][0].__setitem__("shape", [2, 2, 1])),
    ("tensor offset unaligned", lambda h: h["tensors"][0].__setitem__("offset", 2)),
    ("tensor offset oob", lambda h: h["tensors"][0].__setitem__("offset", 10_000)),
    ("tensor overlap", lambda h: h["tensors"][1].__setitem__("offset", 0)),
    ("output dangling", lambda h: h.__setitem__("output", "ghost")),
    ("nodes not list", lambda h: h.__setitem__("nodes", {})),
    ("no input node", lambda h: h["nodes"][0].__setitem__("op", "ReLU")),
]


@pytest.mark.parametrize("label,mutate", HEADER_MUTATIONS,
                         ids=[m[0] for m in HEADER_MUTATIONS])
def test_single_field_corruptions_rejected(label, mutate):
    header, data = _header_and_data(minimal_archive())
    mutate(header)
    with pytest.raises(MtarError):
        parse_archive(_rebuild(header, data))


def test_header_not_json():
    blob = b"{not json"
    prefix = b"MTAR" + struct.pack("<HI", 1, len(blob))
    pad = (-(len(prefix) + len(blob))) % 4
    with pytest.raises(MalformedHeader):
        parse_archive(prefix + blob + b"\x00" * pad)


def test_overlapping_tensors_error_type():
    header, data = _header_and_data(minimal_archive())
    header["tensors"][1]["offset"] = 0
    with pytest.raises(OverlappingTensors):
        parse_archive(_rebuild(header, data))


def test_dangling_reference_error_type():
    header, data = _header_and_data(minimal_archive())
    header["nodes"][1]["inputs"] = ["ghost"]
    with pytest.raises(DanglingReference):
        parse_archive(_rebuild(header, data))


def test_write_rejects_invariant_violation():
    m = minimal_archive()
    bad = ModelArchive(m.version, m.nodes, m.tensors, m.data[:4], m.output)
    with pytest.raises(InvariantViolation):
        write_archive(bad)


# --- topological order ------------------------------------------------------

def _chain_archive():
    g = GraphBuilder(seed=1)
    x = g.input((4, 4, 1), name="in")
    x = g.conv2d(x, 1, 2, 3, name="c")
    x = g.relu(x, name="r")
    x = g.flatten(x, name="f")
    x = g.dense(x, 4 * 4 * 2, 2, name="d")
    return g.build(x)


def test_topological_chain_order():
    m = _chain_archive()
    assert topological_order(m) == ["in", "c", "r", "f", "d"]


def test_topological_diamond():
    nodes = (
        GraphNode("in", "Input", (), attrs={"shape": [2]}),
        GraphNode("l", "ReLU", ("in",)),
        GraphNode("r", "Sigmoid", ("in",)),
        GraphNode("m", "Mul", ("l", "r")),
    )
    m = ModelArchive(1, nodes, (), b"", "m")
    order = topological_order(m)
    assert order.index("l") < order.index("m")
    assert order.index("r") < order.index("m")
    assert sorted(order) == sorted(n.name for n in nodes)


def test_self_loop_cycle_detected():
    nodes = (
        GraphNode("in", "Input", (), attrs={"shape": [2]}),
        GraphNode("x", "ReLU", ("x",)),
    )
    m = ModelArchive(1, nodes, (), b"", "x")
    with pytest.raises(CycleDetected):
        topological_order(m)


def test_two_node_cycle_detected():
    nodes = (
        GraphNode("in", "Input", (), attrs={"shape": [2]}),
        GraphNode("a", "ReLU", ("b",)),
        GraphNode("b", "ReLU", ("a",)),
    )
    m = ModelArchive(1, nodes, (), b"", "b")
    with pytest.raises(CycleDetected):
        topological_order(m)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_topological_order_is_edge_respecting_permutation(seed):
    m = random_archive(np.random.default_rng(seed))
    order = topological_order(m)
    assert sorted(order) == sorted(n.name for n in m.nodes)
    pos = {name: i for i, name in enumerate(order)}
    node_names = set(pos)
    for n in m.nodes:
        for ref in n.inputs:
            if ref in node_names:
                assert pos[ref] < pos[n.name]
