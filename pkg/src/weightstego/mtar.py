"""MTAR model container: parse, validate, serialize, topological order.

Layout: magic "MTAR" | u16 LE version (=1) | u32 LE header length |
UTF-8 JSON header | zero padding to a 4-byte file offset | raw data
section (little-endian f32, row-major). The data section is copied
verbatim on serialization, which is what keeps embedded payload bytes
bit-exact across a parse/write cycle.

See docs/mtar_format.md for the header schema and a canonical example.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    CycleDetected,
    DanglingReference,
    InvariantViolation,
    MalformedHeader,
    OverlappingTensors,
    UnsupportedVersion,
)

MAGIC = b"MTAR"
VERSION = 1

OP_KINDS = frozenset({
    "Input", "Dense", "Conv2D", "ReLU", "Sigmoid", "MaxPool2D",
    "GlobalMaxPool", "Flatten", "Softmax", "ResizeBilinear",
    "GreaterConst", "CastF32", "Mul", "Constant",
})

TENSOR_ROLES = frozenset({"weight", "bias", "constant"})

CANDIDATE_OPS = frozenset({"Dense", "Conv2D"})


@dataclass(frozen=True)
class TensorSpec:
    """A named f32 tensor window inside the data section."""

    name: str
    shape: tuple[int, ...]
    role: str
    offset: int
    dtype: str = "f32"

    @property
    def element_count(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def byte_length(self) -> int:
        return 4 * self.element_count


@dataclass(frozen=True)
class GraphNode:
    name: str
    op: str
    inputs: tuple[str, ...] = ()
    weight: str | None = None
    bias: str | None = None
    attrs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ModelArchive:
    """Immutable parsed model: op graph + tensor table + raw data blob.

    All mutation in the toolkit happens by constructing a new archive
    (usually via ``replace_data``), never in place.
    """

    version: int
    nodes: tuple[GraphNode, ...]
    tensors: tuple[TensorSpec, ...]
    data: bytes
    output: str

    def node(self, name: str) -> GraphNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def tensor(self, name: str) -> TensorSpec:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def has_node(self, name: str) -> bool:
        return any(n.name == name for n in self.nodes)

    def input_node(self) -> GraphNode:
        for n in self.nodes:
            if n.op == "Input":
                return n
        raise InvariantViolation("archive has no Input node")

    def tensor_bytes(self, name: str) -> bytes:
        t = self.tensor(name)
        return self.data[t.offset:t.offset + t.byte_length]

    def tensor_values(self, name: str) -> np.ndarray:
        """Read-only f32 view of a tensor, reshaped row-major."""
        t = self.tensor(name)
        arr = np.frombuffer(self.data, dtype="<f4", count=t.element_count,
                            offset=t.offset)
        return arr.reshape(t.shape)

    def replace_data(self, data: bytes) -> "ModelArchive":
        if len(data) != len(self.data):
            raise InvariantViolation("replacement data length differs")
        return ModelArchive(self.version, self.nodes, self.tensors,
                            bytes(data), self.output)

    def replace_tensor_values(self, updates: dict[str, np.ndarray]) -> "ModelArchive":
        """New archive with the given tensors' f32 values overwritten."""
        buf = bytearray(self.data)
        for name, values in updates.items():
            t = self.tensor(name)
            arr = np.ascontiguousarray(values, dtype="<f4")
            if arr.size != t.element_count:
                raise InvariantViolation(
                    f"update for {name!r} has {arr.size} elements, "
                    f"expected {t.element_count}")
            buf[t.offset:t.offset + t.byte_length] = arr.tobytes()
        return self.replace_data(bytes(buf))


def _require(cond: bool, exc_type, message: str):
    if not cond:
        raise exc_type(message)


def validate_archive(m: ModelArchive) -> None:
    """Check every structural invariant; raises the first violation found."""
    _require(m.version == VERSION, UnsupportedVersion,
             f"version {m.version} not supported")

    node_names = [n.name for n in m.nodes]
    tensor_names = [t.name for t in m.tensors]
    _require(len(set(node_names)) == len(node_names), MalformedHeader,
             "duplicate node name")
    _require(len(set(tensor_names)) == len(tensor_names), MalformedHeader,
             "duplicate tensor name")
    _require(not set(node_names) & set(tensor_names), MalformedHeader,
             "node and tensor share a name")

    tensors = {t.name: t for t in m.tensors}
    for t in m.tensors:
        _require(t.dtype == "f32", MalformedHeader,
                 f"tensor {t.name!r}: only f32 supported in v1")
        _require(t.role in TENSOR_ROLES, MalformedHeader,
                 f"tensor {t.name!r}: unknown role {t.role!r}")
        _require(len(t.shape) >= 1 and all(
            isinstance(d, int) and d > 0 for d in t.shape), MalformedHeader,
            f"tensor {t.name!r}: shape must be positive ints")
        _require(t.offset % 4 == 0, MalformedHeader,
                 f"tensor {t.name!r}: offset not a multiple of 4")
        _require(t.offset >= 0 and t.offset + t.byte_length <= len(m.data),
                 MalformedHeader,
                 f"tensor {t.name!r}: window outside data section")

    windows = sorted((t.offset, t.offset + t.byte_length, t.name)
                     for t in m.tensors)
    for (s0, e0, n0), (s1, e1, n1) in zip(windows, windows[1:]):
        _require(e0 <= s1, OverlappingTensors,
                 f"tensors {n0!r} and {n1!r} overlap")

    input_count = sum(1 for n in m.nodes if n.op == "Input")
    _require(input_count == 1, MalformedHeader,
             f"expected exactly one Input node, found {input_count}")
    _require(any(n.name == m.output for n in m.nodes), DanglingReference,
             f"primary output {m.output!r} names no node")

    known = set(node_names)
    for n in m.nodes:
        _require(n.op in OP_KINDS, MalformedHeader,
                 f"node {n.name!r}: unknown op {n.op!r}")
        for ref in n.inputs:
            _require(ref in known or ref in tensors, DanglingReference,
                     f"node {n.name!r} input {ref!r} names nothing")
        if n.weight is not None:
            _require(n.weight in tensors, DanglingReference,
                     f"node {n.name!r} weight {n.weight!r} missing")
            _require(tensors[n.weight].role == "weight", MalformedHeader,
                     f"node {n.name!r} weight tensor has role "
                     f"{tensors[n.weight].role!r}")
        if n.bias is not None:
            _require(n.bias in tensors, DanglingReference,
                     f"node {n.name!r} bias {n.bias!r} missing")
            _require(tensors[n.bias].role == "bias", MalformedHeader,
                     f"node {n.name!r} bias tensor has role "
                     f"{tensors[n.bias].role!r}")
        if n.op == "Dense":
            _require(n.weight is not None, MalformedHeader,
                     f"Dense node {n.name!r} has no weight")
            _require(len(tensors[n.weight].shape) == 2, MalformedHeader,
                     f"Dense weight {n.weight!r} must be [out, in]")
        if n.op == "Conv2D":
            _require(n.weight is not None, MalformedHeader,
                     f"Conv2D node {n.name!r} has no weight")
            _require(len(tensors[n.weight].shape) == 4, MalformedHeader,
                     f"Conv2D weight {n.weight!r} must be [N,H,W,C]")
            stride = n.attrs.get("stride", 1)
            _require(stride in (1, 2), MalformedHeader,
                     f"Conv2D node {n.name!r}: stride must be 1 or 2")
            _require(n.attrs.get("padding", "same") in ("same", "valid"),
                     MalformedHeader,
                     f"Conv2D node {n.name!r}: bad padding")

    topological_order(m)  # raises CycleDetected on cyclic headers


def topological_order(m: ModelArchive) -> list[str]:
    """Node names, every node after all of its node inputs.

    Stable: among ready nodes the one declared first comes first.
    """
    index = {n.name: i for i, n in enumerate(m.nodes)}
    tensor_names = {t.name for t in m.tensors}
    pending: dict[str, set[str]] = {}
    consumers: dict[str, list[str]] = {}
    for n in m.nodes:
        deps = {ref for ref in n.inputs if ref in index and ref not in tensor_names}
        if n.name in deps:
            raise CycleDetected(f"node {n.name!r} lists itself as input")
        pending[n.name] = deps
        for d in deps:
            consumers.setdefault(d, []).append(n.name)

    ready = sorted((name for name, deps in pending.items() if not deps),
                   key=index.__getitem__)
    order: list[str] = []
    while ready:
        name = ready.pop(0)
        order.append(name)
        freed = []
        for c in consumers.get(name, ()):
            pending[c].discard(name)
            if not pending[c]:
                freed.append(c)
        if freed:
            ready = sorted(ready + freed, key=index.__getitem__)
    if len(order) != len(m.nodes):
        stuck = sorted(set(pending) - set(order), key=index.__getitem__)
        raise CycleDetected(f"cycle involving {stuck[:4]}")
    return order


def _node_to_json(n: GraphNode) -> dict:
    d: dict = {"name": n.name, "op": n.op, "inputs": list(n.inputs)}
    if n.weight is not None:
        d["weight"] = n.weight
    if n.bias is not None:
        d["bias"] = n.bias
    if n.attrs:
        d["attrs"] = n.attrs
    return d


def _tensor_to_json(t: TensorSpec) -> dict:
    return {"name": t.name, "shape": list(t.shape), "dtype": t.dtype,
            "role": t.role, "offset": t.offset}


def write_archive(m: ModelArchive) -> bytes:
    """Deterministic serialization; data section copied verbatim."""
    validate_archive(m)
    header = {
        "nodes": [_node_to_json(n) for n in m.nodes],
        "tensors": [_tensor_to_json(t) for t in m.tensors],
        "output": m.output,
    }
    header_bytes = json.dumps(header, separators=(",", ":"),
                              ensure_ascii=True).encode("utf-8")
    prefix = MAGIC + struct.pack("<HI", m.version, len(header_bytes))
    pad = (-(len(prefix) + len(header_bytes))) % 4
    return prefix + header_bytes + b"\x00" * pad + m.data


def _parse_node(obj, idx: int) -> GraphNode:
    if not isinstance(obj, dict):
        raise MalformedHeader(f"nodes[{idx}] is not an object")
    try:
        name, op = obj["name"], obj["op"]
        inputs = obj.get("inputs", [])
    except (KeyError, TypeError) as e:
        raise MalformedHeader(f"nodes[{idx}] missing field: {e}") from e
    if not isinstance(name, str) or not isinstance(op, str):
        raise MalformedHeader(f"nodes[{idx}]: name/op must be strings")
    if not (isinstance(inputs, list) and all(isinstance(s, str) for s in inputs)):
        raise MalformedHeader(f"node {name!r}: inputs must be a string list")
    weight = obj.get("weight")
    bias = obj.get("bias")
    attrs = obj.get("attrs", {})
    if weight is not None and not isinstance(weight, str):
        raise MalformedHeader(f"node {name!r}: weight must be a string")
    if bias is not None and not isinstance(bias, str):
        raise MalformedHeader(f"node {name!r}: bias must be a string")
    if not isinstance(attrs, dict):
        raise MalformedHeader(f"node {name!r}: attrs must be an object")
    return GraphNode(name, op, tuple(inputs), weight, bias, attrs)


def _parse_tensor(obj, idx: int) -> TensorSpec:
    if not isinstance(obj, dict):
        raise MalformedHeader(f"tensors[{idx}] is not an object")
    try:
        name = obj["name"]
        shape = obj["shape"]
        role = obj["role"]
        offset = obj["offset"]
    except (KeyError, TypeError) as e:
        raise MalformedHeader(f"tensors[{idx}] missing field: {e}") from e
    dtype = obj.get("dtype", "f32")
    if not isinstance(name, str):
        raise MalformedHeader(f"tensors[{idx}]: name must be a string")
    if not (isinstance(shape, list) and shape
            and all(isinstance(d, int) and not isinstance(d, bool) for d in shape)):
        raise MalformedHeader(f"tensor {name!r}: shape must be an int list")
    if not isinstance(offset, int) or isinstance(offset, bool):
        raise MalformedHeader(f"tensor {name!r}: offset must be an int")
    if not isinstance(role, str):
        raise MalformedHeader(f"tensor {name!r}: role must be a string")
    return TensorSpec(name, tuple(shape), role, offset, dtype)


def parse_archive(buf: bytes) -> ModelArchive:
    """Parse and fully validate an MTAR byte stream."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {bytes(buf[:4])!r}")
    if len(buf) < 10:
        raise MalformedHeader("file truncated before header length")
    version, header_len = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} not supported")
    header_end = 10 + header_len
    if header_end > len(buf):
        raise MalformedHeader("header length exceeds file size")
    try:
        header = json.loads(buf[10:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeader(f"header is not valid UTF-8 JSON: {e}") from e
    if not isinstance(header, dict):
        raise MalformedHeader("header root must be an object")
    for key in ("nodes", "tensors", "output"):
        if key not in header:
            raise MalformedHeader(f"header missing {key!r}")
    if not isinstance(header["nodes"], list) or not isinstance(header["tensors"], list):
        raise MalformedHeader("nodes/tensors must be arrays")
    if not isinstance(header["output"], str):
        raise MalformedHeader("output must be a string")

    nodes = tuple(_parse_node(o, i) for i, o in enumerate(header["nodes"]))
    tensors = tuple(_parse_tensor(o, i) for i, o in enumerate(header["tensors"]))
    data_start = header_end + ((-header_end) % 4)
    if data_start > len(buf):
        raise MalformedHeader("file truncated inside alignment padding")
    m = ModelArchive(version, nodes, tensors, bytes(buf[data_start:]),
                     header["output"])
    validate_archive(m)
    return m


def load_archive(path) -> ModelArchive:
    with open(path, "rb") as fh:
        return parse_archive(fh.read())


def save_archive(m: ModelArchive, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_archive(m))
