"""Byte-level payload machinery.

Each selected layer carries an independent stream [u32 LE chunk length |
chunk bytes] written into the lowest `a` bytes of consecutive f32
parameters (storage order, least-significant byte first). The sidecar
manifest records layer order, chunk lengths and MD5 digests; extraction
re-reads the in-layer length, reassembles the payload and verifies MD5
before returning anything.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    CapacityExceeded,
    EmptyPayload,
    IntegrityError,
    LengthMismatch,
    LengthOutOfRange,
    NotACandidate,
)
from .mtar import CANDIDATE_OPS, ModelArchive, TensorSpec

HEADER_BYTES = 4  # u32 LE chunk length reserved per selected layer

VALID_A = (1, 2, 3)


def check_bytes_per_param(a: int) -> int:
    if a not in VALID_A:
        raise NotACandidate(f"bytes-per-param must be 1, 2 or 3, got {a}")
    return a


def replace_param_bytes(value: float, a: int, new_bytes: bytes) -> float:
    """Replace the `a` lowest bytes of the f32 little-endian encoding.

    Byte 0 is the least significant. The sign bit and the top 7 exponent
    bits live in byte 3 and are always preserved; a=3 touches the
    exponent's least-significant bit.
    """
    check_bytes_per_param(a)
    if len(new_bytes) != a:
        raise LengthMismatch(f"expected {a} bytes, got {len(new_bytes)}")
    enc = bytearray(struct.pack("<f", value))
    enc[:a] = new_bytes
    return struct.unpack("<f", bytes(enc))[0]


def capacity_of(spec: TensorSpec, a: int) -> int:
    """Embeddable byte count of a candidate weight tensor: a x elements.

    Dense weights are [out, in] (a*out*in bytes), Conv2D weights are
    [N, H, W, C] (a*N*H*W*C bytes). Bias and constant tensors are never
    candidates.
    """
    check_bytes_per_param(a)
    if spec.role != "weight":
        raise NotACandidate(f"tensor {spec.name!r} has role {spec.role!r}")
    if len(spec.shape) not in (2, 4):
        raise NotACandidate(
            f"tensor {spec.name!r}: rank {len(spec.shape)} is neither Dense nor Conv2D")
    return a * spec.element_count


@dataclass(frozen=True)
class LayerCapacity:
    name: str
    kind: str
    param_count: int
    capacity: int


def candidate_layers(m: ModelArchive) -> list[tuple[str, str, TensorSpec]]:
    """(node name, kind, weight spec) for every Dense/Conv2D node, in
    declaration order."""
    out = []
    for node in m.nodes:
        if node.op in CANDIDATE_OPS and node.weight is not None:
            out.append((node.name, node.op, m.tensor(node.weight)))
    return out


def layer_capacities(m: ModelArchive, a: int) -> list[LayerCapacity]:
    return [LayerCapacity(name, kind, spec.element_count, capacity_of(spec, a))
            for name, kind, spec in candidate_layers(m)]


def proportional_split(weights: list[int], total: int) -> list[int]:
    """Split `total` proportionally to `weights` by largest remainder;
    remainder ties go to the earliest entry."""
    denom = sum(weights)
    if denom <= 0:
        raise CapacityExceeded("no capacity to split over")
    floors = [total * w // denom for w in weights]
    leftovers = total - sum(floors)
    # sort by fractional remainder descending, earliest index on ties
    order = sorted(range(len(weights)),
                   key=lambda i: (-(total * weights[i] % denom), i))
    for i in order[:leftovers]:
        floors[i] += 1
    return floors


@dataclass(frozen=True)
class PayloadManifest:
    """Sidecar record required to extract an embedded payload."""

    model_digest: str
    a: int
    layers: tuple[tuple[str, int], ...]
    total_length: int
    payload_digest: str

    def to_json(self) -> str:
        return json.dumps({
            "model_digest": self.model_digest,
            "bytes_per_param": self.a,
            "layers": [[name, length] for name, length in self.layers],
            "total_length": self.total_length,
            "payload_digest": self.payload_digest,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PayloadManifest":
        obj = json.loads(text)
        return cls(obj["model_digest"], obj["bytes_per_param"],
                   tuple((n, int(l)) for n, l in obj["layers"]),
                   int(obj["total_length"]), obj["payload_digest"])


def _md5(data: bytes) -> str:
    return hashlib.md5(data).hexdigest()


def _stream_positions(length: int, a: int):
    idx = np.arange(length)
    return idx // a, idx % a


def _layer_view(buf: np.ndarray, spec: TensorSpec) -> np.ndarray:
    return buf[spec.offset:spec.offset + spec.byte_length].reshape(
        spec.element_count, 4)


def embed_bytes(m: ModelArchive, plan, payload: bytes):
    """Write the payload into the plan's layers; returns (archive, manifest).

    Every byte outside the selected parameters' low `a` bytes is
    bit-identical to the input archive.
    """
    if len(payload) == 0:
        raise EmptyPayload("payload is empty")
    a = check_bytes_per_param(plan.a)
    if plan.payload_length != len(payload):
        raise LengthMismatch(
            f"plan covers {plan.payload_length} bytes, payload has {len(payload)}")
    if sum(budget for _, budget in plan.selected) != len(payload):
        raise LengthMismatch("plan budgets do not sum to the payload length")

    specs = {}
    for name, budget in plan.selected:
        node = m.node(name)
        if node.op not in CANDIDATE_OPS or node.weight is None:
            raise NotACandidate(f"layer {name!r} is not a Dense/Conv2D layer")
        spec = m.tensor(node.weight)
        if budget + HEADER_BYTES > capacity_of(spec, a):
            raise CapacityExceeded(
                f"layer {name!r}: chunk {budget} + {HEADER_BYTES} header "
                f"exceeds capacity {capacity_of(spec, a)}")
        specs[name] = spec

    model_digest = _md5(m.data)
    buf = np.frombuffer(bytearray(m.data), dtype=np.uint8).copy()
    cursor = 0
    for name, budget in plan.selected:
        chunk = payload[cursor:cursor + budget]
        cursor += budget
        stream = np.frombuffer(struct.pack("<I", budget) + chunk, dtype=np.uint8)
        pidx, bidx = _stream_positions(len(stream), a)
        _layer_view(buf, specs[name])[pidx, bidx] = stream

    manifest = PayloadManifest(model_digest, a, tuple(plan.selected),
                               len(payload), _md5(payload))
    return m.replace_data(buf.tobytes()), manifest


def extract_bytes(m: ModelArchive, manifest: PayloadManifest) -> bytes:
    """Reassemble the payload named by the manifest and verify its MD5."""
    a = check_bytes_per_param(manifest.a)
    buf = np.frombuffer(m.data, dtype=np.uint8)
    chunks = []
    for name, _ in manifest.layers:
        node = m.node(name)
        if node.op not in CANDIDATE_OPS or node.weight is None:
            raise NotACandidate(f"layer {name!r} is not a Dense/Conv2D layer")
        spec = m.tensor(node.weight)
        view = _layer_view(buf, spec)
        cap = capacity_of(spec, a)
        hidx, hb = _stream_positions(HEADER_BYTES, a)
        length = int(struct.unpack("<I", view[hidx, hb].tobytes())[0])
        if length + HEADER_BYTES > cap:
            raise LengthOutOfRange(
                f"layer {name!r}: decoded length {length} + {HEADER_BYTES} "
                f"exceeds capacity {cap} (wrong layer or wrong a?)")
        idx = np.arange(HEADER_BYTES, HEADER_BYTES + length)
        chunks.append(view[idx // a, idx % a].tobytes())
    payload = b"".join(chunks)
    digest = _md5(payload)
    if digest != manifest.payload_digest:
        raise IntegrityError(
            f"payload MD5 {digest} does not match manifest "
            f"{manifest.payload_digest} (payload damaged?)")
    return payload
