"""Coverage-aware layer selection.

Ordering: candidates sorted by parameter count descending, grouped by
equal count; within a group lower coverage first, then Dense members
hoisted to the group front (stable). Plan search tries a = 1, 2, 3 and,
at the first feasible a, binary-searches the shortest prefix of the
ordering whose net capacity (4 header bytes reserved per layer) holds
the payload, then splits the payload proportionally over that prefix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .codec import HEADER_BYTES, candidate_layers, proportional_split
from .engine import forward
from .errors import CapacityExceeded, EmptyPayload, EmptyTestSet, ShapeMismatch
from .mtar import ModelArchive

DEFAULT_COVERAGE_THRESHOLD = 0.75


@dataclass(frozen=True)
class CoverageReport:
    threshold: float
    per_layer: dict
    test_cases: int

    def to_json(self) -> str:
        return json.dumps({
            "threshold": self.threshold,
            "test_cases": self.test_cases,
            "layers": {k: round(float(v), 6) for k, v in self.per_layer.items()},
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CoverageReport":
        obj = json.loads(text)
        return cls(obj["threshold"], dict(obj["layers"]), obj["test_cases"])


@dataclass(frozen=True)
class CandidateLayer:
    name: str
    kind: str
    param_count: int
    coverage: float


@dataclass(frozen=True)
class InjectionPlan:
    a: int
    selected: tuple[tuple[str, int], ...]
    payload_length: int

    def to_json(self) -> str:
        return json.dumps({
            "bytes_per_param": self.a,
            "selected": [[name, budget] for name, budget in self.selected],
            "payload_length": self.payload_length,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "InjectionPlan":
        obj = json.loads(text)
        return cls(obj["bytes_per_param"],
                   tuple((n, int(b)) for n, b in obj["selected"]),
                   int(obj["payload_length"]))


def layer_coverage(m: ModelArchive, tests: np.ndarray,
                   threshold: float = DEFAULT_COVERAGE_THRESHOLD,
                   batch_size: int = 256) -> CoverageReport:
    """Covered fraction per candidate layer over a batch of test inputs.

    A neuron is one Dense output unit, or one Conv2D output channel with
    activation taken as the channel's spatial mean. Activations are
    min-max scaled to [0, 1] per layer per input (a constant layer scales
    to all zeros); a neuron is covered if its scaled activation exceeds
    the threshold on at least one input.
    """
    tests = np.asarray(tests)
    if len(tests) == 0:
        raise EmptyTestSet("coverage needs at least one test input")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    cands = candidate_layers(m)
    covered: dict[str, np.ndarray] = {}
    for start in range(0, len(tests), batch_size):
        trace = forward(m, tests[start:start + batch_size])
        for name, kind, _ in cands:
            act = trace[name].astype(np.float64)
            if kind == "Conv2D":
                act = act.mean(axis=(1, 2))
            if act.ndim != 2:
                raise ShapeMismatch(
                    f"layer {name!r}: expected [B, units], got {list(act.shape)}")
            lo = act.min(axis=1, keepdims=True)
            hi = act.max(axis=1, keepdims=True)
            span = hi - lo
            scaled = np.where(span > 0, (act - lo) / np.where(span > 0, span, 1.0), 0.0)
            hits = (scaled > threshold).any(axis=0)
            covered[name] = hits | covered.get(name, np.zeros_like(hits))
    per_layer = {name: float(covered[name].mean()) for name, _, _ in cands}
    return CoverageReport(threshold, per_layer, len(tests))


def sort_layers(candidates: list[CandidateLayer]) -> list[CandidateLayer]:
    """Best-first candidate order (parameter count, type, coverage)."""
    by_count = sorted(candidates, key=lambda c: -c.param_count)
    result: list[CandidateLayer] = []
    i = 0
    while i < len(by_count):
        j = i
        while j < len(by_count) and by_count[j].param_count == by_count[i].param_count:
            j += 1
        group = sorted(by_count[i:j], key=lambda c: c.coverage)
        result.extend([c for c in group if c.kind == "Dense"])
        result.extend([c for c in group if c.kind != "Dense"])
        i = j
    return result


def _net(c: CandidateLayer, a: int) -> int:
    return a * c.param_count - HEADER_BYTES


def rank_candidates(m: ModelArchive, coverage: CoverageReport, a: int
                    ) -> list[CandidateLayer]:
    """Sorted candidates usable at `a` (net capacity must be positive)."""
    cands = []
    for name, kind, spec in candidate_layers(m):
        if name not in coverage.per_layer:
            raise ValueError(f"coverage report is missing layer {name!r}")
        c = CandidateLayer(name, kind, spec.element_count,
                           float(coverage.per_layer[name]))
        if _net(c, a) > 0:
            cands.append(c)
    return sort_layers(cands)


def plan_injection(m: ModelArchive, payload_length: int,
                   coverage: CoverageReport) -> InjectionPlan:
    """Minimal-impact plan: smallest feasible a, then the shortest
    best-ranked layer prefix that holds the payload."""
    if payload_length < 1:
        raise EmptyPayload("payload length must be >= 1")
    for a in (1, 2, 3):
        ordered = rank_candidates(m, coverage, a)
        nets = [_net(c, a) for c in ordered]
        if sum(nets) < payload_length:
            continue
        # binary search relies on prefix net capacity strictly increasing
        assert all(n > 0 for n in nets)
        cum = np.cumsum(nets)
        lo, hi = 1, len(ordered)
        while lo < hi:
            mid = (lo + hi) // 2
            if cum[mid - 1] >= payload_length:
                hi = mid
            else:
                lo = mid + 1
        prefix = ordered[:lo]
        budgets = proportional_split([_net(c, a) for c in prefix], payload_length)
        return InjectionPlan(a, tuple((c.name, b) for c, b in zip(prefix, budgets)),
                             payload_length)
    raise CapacityExceeded(
        f"payload of {payload_length} bytes exceeds total candidate capacity "
        f"even at a=3")


def build_plan(m: ModelArchive, layer_names: list[str], a: int,
               payload_length: int) -> InjectionPlan:
    """Manual plan over an explicit layer set (ablations, CLI overrides);
    payload split proportionally to the layers' net capacities."""
    if payload_length < 1:
        raise EmptyPayload("payload length must be >= 1")
    by_name = {name: spec for name, _, spec in candidate_layers(m)}
    nets = []
    for name in layer_names:
        if name not in by_name:
            raise CapacityExceeded(f"layer {name!r} is not an injection candidate")
        net = a * by_name[name].element_count - HEADER_BYTES
        if net <= 0:
            raise CapacityExceeded(f"layer {name!r} cannot hold any chunk at a={a}")
        nets.append(net)
    if sum(nets) < payload_length:
        raise CapacityExceeded(
            f"{payload_length} bytes exceed the net capacity {sum(nets)} of "
            f"the given layers at a={a}")
    budgets = proportional_split(nets, payload_length)
    return InjectionPlan(a, tuple(zip(layer_names, budgets)), payload_length)
