"""Command-line interface.

Exit codes: 0 success, 1 domain error (error class name on stderr),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .backdoor import (
    MergeConfig,
    TriggerConfig,
    attach_backdoor,
    synthesize_trigger_dataset,
    train_detector,
)
from .codec import PayloadManifest, embed_bytes, extract_bytes, layer_capacities
from .datasets import SyntheticDatasetConfig, generate_synthetic, load_idx, write_idx
from .errors import ToolkitError
from .mtar import load_archive, save_archive
from .pipeline import (
    evaluate_pipeline,
    run_ablation,
    run_with_extraction,
    write_ablation_csv,
)
from .scanner import scan_archive
from .strategy import (
    DEFAULT_COVERAGE_THRESHOLD,
    CoverageReport,
    InjectionPlan,
    build_plan,
    layer_coverage,
    plan_injection,
)
from .training import TrainConfig


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write(path, data: bytes):
    with open(path, "wb") as fh:
        fh.write(data)


def _load_payload(args) -> bytes:
    if getattr(args, "payload", None):
        return _read(args.payload)
    size = getattr(args, "payload_size", None)
    if size:
        return np.random.default_rng(args.seed).bytes(size)
    raise ToolkitError("give --payload FILE or --payload-size N")


def _coverage_for(args, model) -> CoverageReport:
    if getattr(args, "coverage", None):
        with open(args.coverage) as fh:
            return CoverageReport.from_json(fh.read())
    images, _ = load_idx(args.images, args.labels)
    return layer_coverage(model, images[:args.limit], args.threshold)


def cmd_inspect(args):
    m = load_archive(args.model)
    params = sum(t.element_count for t in m.tensors)
    print(f"MTAR v{m.version}: {len(m.nodes)} nodes, {len(m.tensors)} tensors, "
          f"{params} parameters, {len(m.data)} data bytes")
    print(f"output: {m.output}")
    for n in m.nodes:
        extra = ""
        if n.weight:
            extra = f"  weight={n.weight}{list(m.tensor(n.weight).shape)}"
        inputs = ", ".join(n.inputs)
        print(f"  {n.name:24s} {n.op:14s} <- {inputs}{extra}")
    return 0


def cmd_capacity(args):
    m = load_archive(args.model)
    rows = {a: layer_capacities(m, a) for a in (1, 2, 3)}
    print(f"{'layer':24s} {'kind':8s} {'params':>10s} {'a=1':>10s} "
          f"{'a=2':>10s} {'a=3':>10s}")
    for i, lc in enumerate(rows[1]):
        print(f"{lc.name:24s} {lc.kind:8s} {lc.param_count:>10d} "
              f"{rows[1][i].capacity:>10d} {rows[2][i].capacity:>10d} "
              f"{rows[3][i].capacity:>10d}")
    total = {a: sum(lc.capacity for lc in rows[a]) for a in (1, 2, 3)}
    print(f"{'TOTAL':24s} {'':8s} {sum(l.param_count for l in rows[1]):>10d} "
          f"{total[1]:>10d} {total[2]:>10d} {total[3]:>10d}")
    return 0


def cmd_coverage(args):
    m = load_archive(args.model)
    images, _ = load_idx(args.images, args.labels)
    cov = layer_coverage(m, images[:args.limit], args.threshold)
    print(f"coverage over {cov.test_cases} inputs at threshold {cov.threshold}:")
    for name, frac in cov.per_layer.items():
        print(f"  {name:24s} {frac:.4f}")
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(cov.to_json())
    if args.figure:
        from .figures import save_coverage_figure
        save_coverage_figure(cov, args.figure)
        print(f"figure written to {args.figure}")
    return 0


def cmd_plan(args):
    m = load_archive(args.model)
    payload = _load_payload(args)
    cov = _coverage_for(args, m)
    plan = plan_injection(m, len(payload), cov)
    text = plan.to_json()
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    return 0


def cmd_embed(args):
    m = load_archive(args.model)
    payload = _load_payload(args)
    if args.plan:
        with open(args.plan) as fh:
            plan = InjectionPlan.from_json(fh.read())
    elif args.layers:
        plan = build_plan(m, args.layers.split(","), args.bytes_per_param,
                          len(payload))
    else:
        cov = _coverage_for(args, m)
        plan = plan_injection(m, len(payload), cov)
    embedded, manifest = embed_bytes(m, plan, payload)
    save_archive(embedded, args.out)
    with open(args.manifest, "w") as fh:
        fh.write(manifest.to_json())
    print(f"embedded {len(payload)} bytes at a={plan.a} into "
          f"{len(plan.selected)} layer(s); manifest -> {args.manifest}")
    return 0


def cmd_extract(args):
    m = load_archive(args.model)
    with open(args.manifest) as fh:
        manifest = PayloadManifest.from_json(fh.read())
    payload = extract_bytes(m, manifest)
    _write(args.out, payload)
    print(f"extracted {len(payload)} bytes -> {args.out} (md5 verified)")
    return 0


def cmd_backdoor_attach(args):
    host = load_archive(args.host)
    detector = load_archive(args.detector)
    cfg = MergeConfig(args.tau, args.prefix, args.flag_node or "")
    merged = attach_backdoor(host, detector, cfg)
    save_archive(merged, args.out)
    print(f"backdoored model -> {args.out} (flag node {cfg.flag_node!r}, "
          f"tau {cfg.tau})")
    return 0


def cmd_trigger_synth(args):
    images, _ = load_idx(args.images, args.labels)
    cfg = TriggerConfig(args.kind, args.corner, args.side_fraction, args.fill,
                        args.kernel_length, args.angle, args.seed)
    out_images, out_labels = synthesize_trigger_dataset(images, cfg)
    count = write_idx(out_images, out_labels, args.out_images, args.out_labels)
    print(f"wrote {count} samples ({count // 2} clean + {count // 2} triggered)")
    return 0


def cmd_detector_train(args):
    images, labels = load_idx(args.images, args.labels)
    cfg = TrainConfig(args.lr, args.epochs, args.batch_size, args.seed)
    detector, metrics = train_detector(args.arch, images, labels, cfg)
    save_archive(detector, args.out)
    print(f"detector -> {args.out}")
    print(f"held-out accuracy={metrics.accuracy:.4f} "
          f"precision={metrics.precision:.4f} recall={metrics.recall:.4f}")
    if args.metrics:
        with open(args.metrics, "w") as fh:
            fh.write(metrics.to_json())
    return 0


def cmd_eval(args):
    host = load_archive(args.model)
    images, labels = load_idx(args.images, args.labels)
    if args.ablate:
        rows = run_ablation(host, images, labels, seed=args.seed)
        write_ablation_csv(rows, args.csv)
        print(f"ablation sweep ({len(rows)} rows) -> {args.csv}")
        if args.figure:
            from .figures import save_ablation_figure
            save_ablation_figure(rows, args.figure)
            print(f"figure written to {args.figure}")
        return 0
    payload = _load_payload(args)
    detector = load_archive(args.detector) if args.detector else None
    report = evaluate_pipeline(
        host, images, labels, payload, detector,
        MergeConfig(args.tau) if detector else None,
        threshold=args.threshold, runs=args.runs,
        model_id=args.model, dataset_id=args.images)
    print(report.to_json())
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(report.to_json())
    if args.figure:
        from .figures import save_eval_figure
        save_eval_figure(report, args.figure)
        print(f"figure written to {args.figure}")
    return 0


def cmd_run(args):
    m = load_archive(args.model)
    with open(args.manifest) as fh:
        manifest = PayloadManifest.from_json(fh.read())
    images, _ = load_idx(args.images, args.labels)
    if not 0 <= args.index < len(images):
        raise ToolkitError(f"--index {args.index} outside dataset of {len(images)}")
    cfg = MergeConfig(args.tau, args.prefix, args.flag_node or "")
    result = run_with_extraction(m, manifest, images[args.index], cfg, args.out)
    print(f"classification: {result.classification}")
    print(f"trigger flag: {result.flag}")
    if result.extracted:
        print(f"payload extracted -> {args.out}")
    if result.integrity_error:
        print(f"IntegrityError: {result.integrity_error}", file=sys.stderr)
        return 1
    return 0


def cmd_scan(args):
    m = load_archive(args.model)
    report = scan_archive(m, args.min_plausible_layers)
    print(f"verdict: {report.verdict}")
    if report.findings:
        print("structural findings:")
        for f in report.findings:
            print(f"  {f.pattern}: {', '.join(f.nodes)}")
    plausible = [p for p in report.probes if p.plausible]
    if plausible:
        print("plausible codec probes:")
        for p in plausible:
            print(f"  layer {p.layer} a={p.a} decoded length {p.decoded_length}")
    print(f"{'tensor':24s} {'params':>9s} "
          f"{'chi2/b0':>12s} {'chi2/b1':>12s} {'chi2/b2':>12s} "
          f"{'H(b0)':>7s} {'H(b1)':>7s} {'H(b2)':>7s}")
    for t in report.statistics:
        chi = [p.chi_square for p in t.positions]
        ent = [p.entropy for p in t.positions]
        mark = "" if t.verdict_bearing else "  (informational)"
        print(f"{t.tensor:24s} {t.param_count:>9d} "
              f"{chi[0]:>12.1f} {chi[1]:>12.1f} {chi[2]:>12.1f} "
              f"{ent[0]:>7.3f} {ent[1]:>7.3f} {ent[2]:>7.3f}{mark}")
    print(f"note: {report.note}")
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(report.to_json())
    if args.figure:
        from .figures import save_scan_figure
        save_scan_figure(report, args.figure)
        print(f"figure written to {args.figure}")
    return 0


def cmd_dataset_gen(args):
    cfg = SyntheticDatasetConfig(args.classes, args.size, args.per_class,
                                 args.noise, args.seed, args.channels)
    images, labels = generate_synthetic(cfg)
    count = write_idx(images, labels, args.out_images, args.out_labels)
    print(f"wrote {count} samples of {args.classes} classes at "
          f"{args.size}x{args.size}x{args.channels}")
    return 0


def _add_idx_args(p):
    p.add_argument("--images", required=True, help="IDX image file")
    p.add_argument("--labels", required=True, help="IDX label file")


def _add_coverage_args(p):
    p.add_argument("--threshold", type=float, default=DEFAULT_COVERAGE_THRESHOLD,
                   help="activation threshold (default 0.75)")
    p.add_argument("--limit", type=int, default=64,
                   help="max coverage test inputs")
    p.add_argument("--coverage", help="reuse a coverage JSON instead")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weightstego",
        description="Embed, extract and detect byte payloads in MTAR "
                    "model-weight files.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="summarize an archive")
    p.add_argument("model")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("capacity", help="per-layer capacity table")
    p.add_argument("model")
    p.set_defaults(fn=cmd_capacity)

    p = sub.add_parser("coverage", help="per-layer neuron coverage")
    p.add_argument("model")
    _add_idx_args(p)
    p.add_argument("--threshold", type=float, default=DEFAULT_COVERAGE_THRESHOLD)
    p.add_argument("--limit", type=int, default=64)
    p.add_argument("--json", help="write the report as JSON")
    p.add_argument("--figure", help="write a PNG figure")
    p.set_defaults(fn=cmd_coverage)

    p = sub.add_parser("plan", help="compute an injection plan")
    p.add_argument("model")
    p.add_argument("--payload", help="payload file")
    p.add_argument("--payload-size", type=int, help="random payload of N bytes")
    _add_idx_args(p)
    _add_coverage_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the plan as JSON")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("embed", help="embed a payload")
    p.add_argument("model")
    p.add_argument("--payload", help="payload file")
    p.add_argument("--payload-size", type=int)
    p.add_argument("--plan", help="use a precomputed plan JSON")
    p.add_argument("--layers", help="comma-separated manual layer list")
    p.add_argument("--bytes-per-param", type=int, default=1, choices=(1, 2, 3))
    p.add_argument("--images", help="IDX images for coverage")
    p.add_argument("--labels", help="IDX labels for coverage")
    _add_coverage_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output MTAR path")
    p.add_argument("--manifest", required=True, help="output manifest JSON")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("extract", help="extract an embedded payload")
    p.add_argument("model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("backdoor", help="backdoor transforms")
    bsub = p.add_subparsers(dest="subcommand", required=True)
    pa = bsub.add_parser("attach", help="graft a trigger branch")
    pa.add_argument("host")
    pa.add_argument("--detector", required=True)
    pa.add_argument("--out", required=True)
    pa.add_argument("--tau", type=float, default=0.5)
    pa.add_argument("--prefix", default="bd/")
    pa.add_argument("--flag-node", default=None)
    pa.set_defaults(fn=cmd_backdoor_attach)

    p = sub.add_parser("trigger", help="trigger datasets")
    tsub = p.add_subparsers(dest="subcommand", required=True)
    pt = tsub.add_parser("synth", help="synthesize a trigger dataset")
    _add_idx_args(pt)
    pt.add_argument("--kind", choices=("patch", "motion-blur"), default="patch")
    pt.add_argument("--corner", default="top-left",
                    choices=("top-left", "top-right", "bottom-left",
                             "bottom-right"))
    pt.add_argument("--side-fraction", type=float, default=0.25)
    pt.add_argument("--fill", type=float, default=1.0)
    pt.add_argument("--kernel-length", type=int, default=5)
    pt.add_argument("--angle", choices=("horizontal", "vertical"),
                    default="horizontal")
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--out-images", required=True)
    pt.add_argument("--out-labels", required=True)
    pt.set_defaults(fn=cmd_trigger_synth)

    p = sub.add_parser("detector", help="trigger detectors")
    dsub = p.add_subparsers(dest="subcommand", required=True)
    pd = dsub.add_parser("train", help="train a detector")
    _add_idx_args(pd)
    pd.add_argument("--arch", choices=("mini", "paper-cnn"), default="mini")
    pd.add_argument("--epochs", type=int, default=8)
    pd.add_argument("--lr", type=float, default=0.08)
    pd.add_argument("--batch-size", type=int, default=32)
    pd.add_argument("--seed", type=int, default=0)
    pd.add_argument("--out", required=True)
    pd.add_argument("--metrics", help="write metrics JSON")
    pd.set_defaults(fn=cmd_detector_train)

    p = sub.add_parser("eval", help="end-to-end evaluation report")
    p.add_argument("model")
    _add_idx_args(p)
    p.add_argument("--payload")
    p.add_argument("--payload-size", type=int)
    p.add_argument("--detector")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=DEFAULT_COVERAGE_THRESHOLD)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write the report JSON")
    p.add_argument("--figure", help="write a PNG figure")
    p.add_argument("--ablate", action="store_true",
                   help="run the factor sweep instead")
    p.add_argument("--csv", default="ablation.csv",
                   help="CSV path for --ablate")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("run", help="classify; extract payload when triggered")
    p.add_argument("model")
    p.add_argument("--manifest", required=True)
    _add_idx_args(p)
    p.add_argument("--index", type=int, default=0, help="sample index")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--prefix", default="bd/")
    p.add_argument("--flag-node", default=None)
    p.add_argument("--out", required=True, help="payload output path")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("scan", help="structural/statistical/codec scan")
    p.add_argument("model")
    p.add_argument("--min-plausible-layers", type=int, default=1)
    p.add_argument("--json", help="write the report JSON")
    p.add_argument("--figure", help="write a PNG figure")
    p.set_defaults(fn=cmd_scan)

    p = sub.add_parser("dataset", help="dataset tools")
    gsub = p.add_subparsers(dest="subcommand", required=True)
    pg = gsub.add_parser("gen", help="generate the synthetic shape dataset")
    pg.add_argument("--classes", type=int, default=4)
    pg.add_argument("--size", type=int, default=28)
    pg.add_argument("--per-class", type=int, default=100)
    pg.add_argument("--noise", type=float, default=0.1)
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--channels", type=int, default=1)
    pg.add_argument("--out-images", required=True)
    pg.add_argument("--out-labels", required=True)
    pg.set_defaults(fn=cmd_dataset_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ToolkitError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
