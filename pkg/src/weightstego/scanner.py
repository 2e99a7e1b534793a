"""Defensive scans over MTAR archives.

Three passes: structural (grafted trigger/merge shapes in the graph),
statistical (low-order byte histograms per weight tensor) and codec
(decodable chunk framing). None of them mutates the archive.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc

from .codec import HEADER_BYTES, candidate_layers, capacity_of
from .mtar import ModelArchive

STAT_NOTE = (
    "chi-square/entropy on low-order weight bytes are weak evidence: "
    "trained weights already carry near-uniform mantissa bytes and "
    "compressed or encrypted payloads mimic them, so clean statistics "
    "do not certify absence and suspicious statistics are only a hint."
)

VERDICTS = ("clean", "suspicious-statistics", "suspicious-structure",
            "decodable-payload")

MIN_VERDICT_PARAMS = 1024

CHI2_DF = 255


@dataclass(frozen=True)
class StructuralFinding:
    pattern: str
    nodes: tuple[str, ...]


@dataclass(frozen=True)
class BytePositionStats:
    position: int
    chi_square: float
    entropy: float
    p_value: float


@dataclass(frozen=True)
class TensorStats:
    tensor: str
    param_count: int
    verdict_bearing: bool
    positions: tuple[BytePositionStats, ...]


@dataclass(frozen=True)
class CodecProbe:
    layer: str
    a: int
    decoded_length: int
    plausible: bool


@dataclass(frozen=True)
class ScanReport:
    findings: tuple[StructuralFinding, ...]
    statistics: tuple[TensorStats, ...]
    probes: tuple[CodecProbe, ...]
    verdict: str
    note: str = STAT_NOTE

    def to_json(self) -> str:
        return json.dumps({
            "verdict": self.verdict,
            "note": self.note,
            "structural": [{"pattern": f.pattern, "nodes": list(f.nodes)}
                           for f in self.findings],
            "statistics": [{
                "tensor": t.tensor,
                "param_count": t.param_count,
                "verdict_bearing": t.verdict_bearing,
                "positions": [{
                    "byte": p.position,
                    "chi_square": round(p.chi_square, 3),
                    "entropy": round(p.entropy, 4),
                    "p_value": p.p_value,
                } for p in t.positions],
            } for t in self.statistics],
            "codec_probes": [{
                "layer": p.layer, "a": p.a,
                "decoded_length": p.decoded_length,
                "plausible": p.plausible,
            } for p in self.probes],
        }, indent=2)


def _consumers(m: ModelArchive) -> dict:
    node_names = {n.name for n in m.nodes}
    cons: dict[str, list[str]] = {name: [] for name in node_names}
    for n in m.nodes:
        for ref in n.inputs:
            if ref in node_names:
                cons[ref].append(n.name)
    return cons


def _reachable(roots, cons) -> set:
    stack, seen = list(roots), set()
    while stack:
        name = stack.pop()
        if name in seen:
            continue
        seen.add(name)
        stack.extend(cons[name])
    return seen


def _is_ones_constant(m: ModelArchive, ref: str) -> bool:
    if m.has_node(ref):
        node = m.node(ref)
        return node.op == "Constant" and float(node.attrs.get("value", 0.0)) == 1.0
    try:
        spec = m.tensor(ref)
    except KeyError:
        return False
    if spec.role != "constant":
        return False
    return bool((m.tensor_values(ref) == 1.0).all())


def scan_structural(m: ModelArchive) -> list[StructuralFinding]:
    """Graph patterns left behind by trigger grafts.

    Reports GreaterConst->CastF32 chains whose cast output never feeds
    the primary-output path, multiplies of the primary output by a
    constant-ones operand, and input branches that share no node before
    the output.
    """
    cons = _consumers(m)
    findings: list[StructuralFinding] = []

    on_output_path = _ancestors(m, m.output)
    chains = []
    for n in m.nodes:
        if n.op != "GreaterConst":
            continue
        for c in cons[n.name]:
            cnode = m.node(c)
            if cnode.op != "CastF32":
                continue
            if not any(k in on_output_path for k in cons[c]):
                chains.append((n.name, c))

    out_node = m.node(m.output)
    merge_nodes: list[str] = []
    if out_node.op == "Mul":
        ones = [ref for ref in out_node.inputs if _is_ones_constant(m, ref)]
        if ones:
            merge_nodes = [out_node.name] + ones

    if merge_nodes and chains:
        involved = tuple(dict.fromkeys(
            [g for g, c in chains] + [c for g, c in chains] + merge_nodes))
        findings.append(StructuralFinding("merge-pattern", involved))
    elif merge_nodes:
        findings.append(StructuralFinding("ones-multiply", tuple(merge_nodes)))
    elif chains:
        for g, c in chains:
            findings.append(StructuralFinding("dormant-flag", (g, c)))

    inp = m.input_node()
    roots = cons[inp.name]
    if len(roots) >= 2:
        reach = {r: _reachable([r], cons) for r in roots}
        for i in range(len(roots)):
            for j in range(i + 1, len(roots)):
                shared = reach[roots[i]] & reach[roots[j]]
                if shared <= {m.output}:
                    findings.append(StructuralFinding(
                        "parallel-branch", (roots[i], roots[j], m.output)))
    return findings


def _ancestors(m: ModelArchive, name: str) -> set:
    node_names = {n.name for n in m.nodes}
    stack, seen = [name], set()
    while stack:
        cur = stack.pop()
        if cur in seen or cur not in node_names:
            continue
        seen.add(cur)
        stack.extend(m.node(cur).inputs)
    return seen


def byte_histogram(m: ModelArchive, tensor: str, position: int) -> np.ndarray:
    """256-bin count of byte `position` across a tensor's f32 parameters."""
    spec = m.tensor(tensor)
    raw = np.frombuffer(m.data, dtype=np.uint8, count=spec.byte_length,
                        offset=spec.offset).reshape(spec.element_count, 4)
    return np.bincount(raw[:, position], minlength=256)


def chi_square_uniform(hist: np.ndarray) -> float:
    n = int(hist.sum())
    expected = n / 256.0
    return float(((hist - expected) ** 2 / expected).sum())


def shannon_entropy(hist: np.ndarray) -> float:
    n = hist.sum()
    p = hist[hist > 0] / n
    return float(-(p * np.log2(p)).sum())


def chi_square_p_value(stat: float, df: int = CHI2_DF) -> float:
    # survival function of chi2(df) via the regularized incomplete gamma
    return float(gammaincc(df / 2.0, stat / 2.0))


def scan_statistics(m: ModelArchive) -> list[TensorStats]:
    out = []
    for spec in m.tensors:
        if spec.role != "weight":
            continue
        positions = []
        for p in (0, 1, 2):
            hist = byte_histogram(m, spec.name, p)
            stat = chi_square_uniform(hist)
            positions.append(BytePositionStats(
                p, stat, shannon_entropy(hist), chi_square_p_value(stat)))
        out.append(TensorStats(spec.name, spec.element_count,
                               spec.element_count >= MIN_VERDICT_PARAMS,
                               tuple(positions)))
    return out


def scan_codec(m: ModelArchive) -> list[CodecProbe]:
    """Decode the leading u32 of every candidate layer at each a; a probe
    is plausible iff 0 < length and length + 4 <= capacity(a)."""
    buf = np.frombuffer(m.data, dtype=np.uint8)
    probes = []
    for name, _, spec in candidate_layers(m):
        view = buf[spec.offset:spec.offset + spec.byte_length].reshape(
            spec.element_count, 4)
        for a in (1, 2, 3):
            cap = capacity_of(spec, a)
            if cap < HEADER_BYTES:
                continue
            idx = np.arange(HEADER_BYTES)
            raw = view[idx // a, idx % a].tobytes()
            length = struct.unpack("<I", raw)[0]
            plausible = 0 < length and length + HEADER_BYTES <= cap
            probes.append(CodecProbe(name, a, int(length), plausible))
    return probes


def scan_archive(m: ModelArchive, min_plausible_layers: int = 1,
                 p_threshold: float = 1e-3) -> ScanReport:
    """Full scan with verdict precedence decodable-payload >
    suspicious-structure > suspicious-statistics > clean.

    Statistics bear the verdict only for byte positions 0 and 1 of
    tensors with >= 1024 parameters; position 2 carries exponent
    structure and is reported without affecting the verdict.
    """
    findings = scan_structural(m)
    stats = scan_statistics(m)
    probes = scan_codec(m)

    plausible_layers = {p.layer for p in probes if p.plausible}
    stat_hit = any(
        t.verdict_bearing and p.position in (0, 1) and p.p_value < p_threshold
        for t in stats for p in t.positions)

    if len(plausible_layers) >= min_plausible_layers and plausible_layers:
        verdict = "decodable-payload"
    elif findings:
        verdict = "suspicious-structure"
    elif stat_hit:
        verdict = "suspicious-statistics"
    else:
        verdict = "clean"
    return ScanReport(tuple(findings), tuple(stats), tuple(probes), verdict)
