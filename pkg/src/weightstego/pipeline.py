"""End-to-end pipelines: embed + backdoor evaluation, trigger-gated
extraction, and the factor-sweep ablation runner.

Latency is wall clock, averaged over `runs` measured iterations after
`warmup` discarded ones, with load+extract and inference timed as
separate stages.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .backdoor import MergeConfig, attach_backdoor, read_trigger_flag
from .codec import embed_bytes, extract_bytes
from .engine import forward
from .errors import EmptyDataset, IntegrityError
from .mtar import ModelArchive, parse_archive, write_archive
from .strategy import (
    CoverageReport,
    InjectionPlan,
    build_plan,
    layer_coverage,
    plan_injection,
)
from .training import predict_top1

DEFAULT_RUNS = 50
DEFAULT_WARMUP = 5


@dataclass(frozen=True)
class EvalReport:
    model_id: str
    dataset_id: str
    baseline_accuracy: float
    embedded_accuracy: float
    accuracy_delta: float
    clean_load_ms: float
    load_extract_ms: float
    inference_ms: float
    runs: int
    plan: InjectionPlan
    round_trip_ok: bool

    def to_json(self) -> str:
        import json
        return json.dumps({
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "baseline_accuracy": self.baseline_accuracy,
            "embedded_accuracy": self.embedded_accuracy,
            "accuracy_delta": self.accuracy_delta,
            "latency_ms": {
                "clean_load": self.clean_load_ms,
                "load_extract": self.load_extract_ms,
                "inference": self.inference_ms,
            },
            "runs": self.runs,
            "plan": {
                "bytes_per_param": self.plan.a,
                "selected": [[n, b] for n, b in self.plan.selected],
                "payload_length": self.plan.payload_length,
            },
            "round_trip_ok": self.round_trip_ok,
        }, indent=2)


def _timed_ms(fn, runs, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.mean(times))


def evaluate_pipeline(host: ModelArchive, images, labels, payload: bytes,
                      detector: ModelArchive | None = None,
                      merge_cfg: MergeConfig | None = None,
                      coverage: CoverageReport | None = None,
                      threshold: float = 0.75,
                      runs: int = DEFAULT_RUNS, warmup: int = DEFAULT_WARMUP,
                      model_id: str = "host", dataset_id: str = "dataset",
                      plan: InjectionPlan | None = None) -> EvalReport:
    """plan -> embed -> (attach) -> accuracy before/after + latency report."""
    if len(images) == 0:
        raise EmptyDataset("evaluation dataset is empty")
    baseline = predict_top1(host, images, labels)
    if baseline <= 0.0:
        raise ValueError("host has zero baseline accuracy on this dataset")

    if plan is None:
        if coverage is None:
            coverage = layer_coverage(host, images[:64], threshold)
        plan = plan_injection(host, len(payload), coverage)
    embedded, manifest = embed_bytes(host, plan, payload)
    final = embedded
    if detector is not None:
        final = attach_backdoor(embedded, detector, merge_cfg or MergeConfig())

    after = predict_top1(final, images, labels)
    round_trip_ok = extract_bytes(final, manifest) == payload

    clean_bytes = write_archive(host)
    final_bytes = write_archive(final)
    clean_load = _timed_ms(lambda: parse_archive(clean_bytes), runs, warmup)
    load_extract = _timed_ms(
        lambda: extract_bytes(parse_archive(final_bytes), manifest), runs, warmup)
    bench = np.ascontiguousarray(images[:min(32, len(images))])
    inference = _timed_ms(lambda: forward(final, bench), runs, warmup)

    return EvalReport(model_id, dataset_id, baseline, after,
                      baseline - after, clean_load, load_extract, inference,
                      runs, plan, round_trip_ok)


@dataclass(frozen=True)
class RunResult:
    classification: int
    flag: bool
    extracted: bool
    integrity_error: str | None = None


def run_with_extraction(model: ModelArchive, manifest, image,
                        merge_cfg: MergeConfig, output_path) -> RunResult:
    """Classify one image; when the trigger flag is set, extract the
    payload to output_path. Payload bytes are written, never run."""
    batch = np.asarray(image, dtype=np.float32)[np.newaxis, ...]
    trace = forward(model, batch)
    classification = int(np.argmax(trace[model.output][0]))
    flag = read_trigger_flag(trace, merge_cfg)[0]
    if not flag:
        return RunResult(classification, False, False)
    try:
        payload = extract_bytes(model, manifest)
    except IntegrityError as e:
        return RunResult(classification, True, False, str(e))
    with open(output_path, "wb") as fh:
        fh.write(payload)
    return RunResult(classification, True, True)


# --- ablation sweep ---------------------------------------------------------

ABLATION_FIELDS = ("factor", "variant", "bytes_per_param", "layers",
                   "coverage", "payload_bytes", "baseline_accuracy",
                   "accuracy", "accuracy_delta")


def _eval_variant(host, images, labels, payload, layers, a, baseline, coverage):
    plan = build_plan(host, layers, a, len(payload))
    embedded, _ = embed_bytes(host, plan, payload)
    acc = predict_top1(embedded, images, labels)
    cov = float(np.mean([coverage.per_layer[l] for l in layers]))
    return {
        "bytes_per_param": a,
        "layers": "+".join(layers),
        "coverage": round(cov, 4),
        "payload_bytes": len(payload),
        "baseline_accuracy": round(baseline, 4),
        "accuracy": round(acc, 4),
        "accuracy_delta": round(baseline - acc, 4),
    }


def run_ablation(host: ModelArchive, images, labels,
                 coverage: CoverageReport | None = None,
                 seed: int = 0) -> list[dict]:
    """Sweeps layer type, layer count 1-5, coverage extreme, and
    bytes-per-param on a trained host; returns CSV-ready rows.

    The host needs at least five Conv2D layers and one Dense layer with
    a few thousand parameters (``deep_conv_classifier`` qualifies).
    """
    from .codec import candidate_layers

    rng = np.random.default_rng(seed)
    if coverage is None:
        coverage = layer_coverage(host, images[:64])
    baseline = predict_top1(host, images, labels)
    cands = candidate_layers(host)
    convs = [(n, s.element_count) for n, k, s in cands if k == "Conv2D"]
    denses = [(n, s.element_count) for n, k, s in cands if k == "Dense"]
    if len(convs) < 5 or not denses:
        raise ValueError("ablation host needs >= 5 conv layers and a dense layer")
    convs_by_size = sorted(convs, key=lambda t: -t[1])
    top_conv = convs_by_size[0][0]
    big_dense = max(denses, key=lambda t: t[1])[0]

    rows: list[dict] = []

    def add(factor, variant, layers, a, payload):
        row = {"factor": factor, "variant": variant}
        row.update(_eval_variant(host, images, labels, payload, layers, a,
                                 baseline, coverage))
        rows.append(row)

    # layer type: same payload, comparably sized dense vs conv, a=3
    dense_params = [c for n, c in denses if n == big_dense][0]
    pair_conv = min(convs, key=lambda t: abs(t[1] - dense_params))
    size = min(dense_params, pair_conv[1]) * 3 - 4
    payload = rng.bytes(int(size * 0.8))
    add("layer-type", "dense", [big_dense], 3, payload)
    add("layer-type", "conv", [pair_conv[0]], 3, payload)

    # layer count 1..5 conv layers, a=3, payload sized for the 1-layer arm
    payload = rng.bytes(int((convs_by_size[0][1] * 3 - 4) * 0.6))
    for k in range(1, 6):
        layers = [n for n, _ in convs_by_size[:k]]
        add("layer-count", f"{k}-conv", layers, 3, payload)

    # coverage extremes among convs that can hold the payload at a=3
    payload = rng.bytes(int((sorted(c for _, c in convs)[1] * 3 - 4) * 0.6))
    feasible = [n for n, c in convs if c * 3 - 4 >= len(payload)]
    by_cov = sorted(feasible, key=lambda n: coverage.per_layer[n])
    add("coverage", "low", [by_cov[0]], 3, payload)
    add("coverage", "high", [by_cov[-1]], 3, payload)

    # bytes per param on the fixed top conv layer
    payload = rng.bytes(int((convs_by_size[0][1] - 4) * 0.8))
    for a in (1, 2, 3):
        add("bytes-per-param", f"a={a}", [top_conv], a, payload)
    return rows


def write_ablation_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
