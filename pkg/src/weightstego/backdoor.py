"""Trigger branch grafting and trigger-detector training.

The graft adds a parallel branch input -> ResizeBilinear -> detector ->
GreaterConst(tau) -> CastF32 (the flag node, read out of band) plus a
multiply of the original output by a ones constant, republished under
the original output name. The multiply keeps the public output
bit-identical for every finite input; the flag node is how a runtime
learns whether the trigger fired.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .builder import detector_cnn, detector_mini
from .engine import forward, infer_shapes
from .errors import (
    EmptyDataset,
    FlagNodeMissing,
    MultipleInputs,
    MultipleOutputs,
    NameCollision,
    PatchLargerThanImage,
    ShapeMismatch,
    SingleClassDataset,
)
from .mtar import GraphNode, ModelArchive, TensorSpec, validate_archive
from .training import SIGMOID_BCE, TrainConfig, train

CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")


@dataclass(frozen=True)
class TriggerConfig:
    kind: str = "patch"  # "patch" or "motion-blur"
    corner: str = "top-left"
    side_fraction: float = 0.25
    fill: float = 1.0
    kernel_length: int = 5
    angle: str = "horizontal"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("patch", "motion-blur"):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.corner not in CORNERS:
            raise ValueError(f"corner must be one of {CORNERS}")
        if not 0.0 < self.side_fraction <= 0.5:
            raise ValueError("side fraction must lie in (0, 0.5]")
        if self.kernel_length < 3 or self.kernel_length % 2 == 0:
            raise ValueError("kernel length must be odd and >= 3")
        if self.angle not in ("horizontal", "vertical"):
            raise ValueError("angle must be horizontal or vertical")


@dataclass(frozen=True)
class MergeConfig:
    tau: float = 0.5
    prefix: str = "bd/"
    flag_node: str = ""

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if not self.flag_node:
            object.__setattr__(self, "flag_node", self.prefix + "flag")

    def to_json(self) -> str:
        return json.dumps({"tau": self.tau, "prefix": self.prefix,
                           "flag_node": self.flag_node}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MergeConfig":
        obj = json.loads(text)
        return cls(obj["tau"], obj.get("prefix", "bd/"), obj.get("flag_node", ""))


def apply_patch(images: np.ndarray, cfg: TriggerConfig) -> np.ndarray:
    n, h, w, _ = images.shape
    side = int(round(cfg.side_fraction * min(h, w)))
    side = max(side, 1)
    if side > min(h, w):
        raise PatchLargerThanImage(f"patch side {side} exceeds image {h}x{w}")
    out = images.copy()
    rows = slice(0, side) if cfg.corner.startswith("top") else slice(h - side, h)
    cols = slice(0, side) if cfg.corner.endswith("left") else slice(w - side, w)
    out[:, rows, cols, :] = cfg.fill
    return out


def apply_motion_blur(images: np.ndarray, cfg: TriggerConfig) -> np.ndarray:
    """1xL (or Lx1) mean filter, edge-replicated so constants stay fixed."""
    length = cfg.kernel_length
    pad = length // 2
    if cfg.angle == "horizontal":
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (0, 0)), mode="edge")
        stacked = [padded[:, :, k:k + images.shape[2], :] for k in range(length)]
    else:
        padded = np.pad(images, ((0, 0), (pad, pad), (0, 0), (0, 0)), mode="edge")
        stacked = [padded[:, k:k + images.shape[1], :, :] for k in range(length)]
    acc = np.zeros(images.shape, dtype=np.float64)
    for s in stacked:
        acc += s
    return (acc / length).astype(np.float32)


def apply_trigger(images: np.ndarray, cfg: TriggerConfig) -> np.ndarray:
    if cfg.kind == "patch":
        return apply_patch(images, cfg)
    return apply_motion_blur(images, cfg)


def synthesize_trigger_dataset(images: np.ndarray, cfg: TriggerConfig):
    """2N samples: the N originals labeled 0 then N triggered copies
    labeled 1."""
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise EmptyDataset("base dataset is empty")
    triggered = apply_trigger(images, cfg)
    out_images = np.concatenate([images, triggered])
    out_labels = np.concatenate([np.zeros(len(images), dtype=np.int64),
                                 np.ones(len(images), dtype=np.int64)])
    return out_images, out_labels


@dataclass(frozen=True)
class DetectorMetrics:
    accuracy: float
    precision: float
    recall: float
    precision_defined: bool = True
    recall_defined: bool = True

    def to_json(self) -> str:
        return json.dumps({
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "precision_defined": self.precision_defined,
            "recall_defined": self.recall_defined}, indent=2)


def detector_metrics(scores: np.ndarray, labels: np.ndarray,
                     threshold: float = 0.5) -> DetectorMetrics:
    """Accuracy/precision/recall with positive = triggered, cut at 0.5.
    Undefined ratios are reported as 0 with the defined flag cleared."""
    pred = (np.asarray(scores).reshape(-1) > threshold).astype(int)
    truth = np.asarray(labels).reshape(-1).astype(int)
    tp = int(((pred == 1) & (truth == 1)).sum())
    fp = int(((pred == 1) & (truth == 0)).sum())
    fn = int(((pred == 0) & (truth == 1)).sum())
    tn = int(((pred == 0) & (truth == 0)).sum())
    accuracy = (tp + tn) / max(len(truth), 1)
    p_def, r_def = tp + fp > 0, tp + fn > 0
    precision = tp / (tp + fp) if p_def else 0.0
    recall = tp / (tp + fn) if r_def else 0.0
    return DetectorMetrics(accuracy, precision, recall, p_def, r_def)


def build_detector(arch: str, image_size: int, channels: int, seed: int) -> ModelArchive:
    if arch == "mini":
        return detector_mini(image_size=image_size, channels=channels, seed=seed)
    if arch == "paper-cnn":
        if (image_size, channels) != (96, 3):
            raise ShapeMismatch("paper-cnn expects a 96x96x3 input")
        return detector_cnn(seed=seed)
    raise ValueError(f"unknown detector architecture {arch!r}")


def train_detector(arch: str, images: np.ndarray, labels: np.ndarray,
                   cfg: TrainConfig):
    """80/20 seeded split, sigmoid-BCE training; returns (archive, metrics)."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels).astype(int)
    if len(images) == 0:
        raise EmptyDataset("detector dataset is empty")
    if len(np.unique(labels)) < 2:
        raise SingleClassDataset("detector training needs both classes")
    if images.ndim != 4 or images.shape[1] != images.shape[2]:
        raise ShapeMismatch("detector images must be [N, S, S, C]")

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(images))
    cut = int(0.8 * len(images))
    tr_idx, te_idx = perm[:cut], perm[cut:]

    model = build_detector(arch, images.shape[1], images.shape[3], cfg.seed)
    cfg = TrainConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size,
                      cfg.seed, SIGMOID_BCE)
    trained = train(model, images[tr_idx], labels[tr_idx], cfg)
    scores = []
    for start in range(0, len(te_idx), 256):
        xb = images[te_idx[start:start + 256]]
        scores.append(forward(trained, xb)[trained.output].reshape(-1))
    metrics = detector_metrics(np.concatenate(scores), labels[te_idx])
    return trained, metrics


def _shift_specs(tensors, delta, rename):
    return [TensorSpec(rename(t.name), t.shape, t.role, t.offset + delta, t.dtype)
            for t in tensors]


def attach_backdoor(host: ModelArchive, detector: ModelArchive,
                    cfg: MergeConfig) -> ModelArchive:
    """Graft the detector branch and transparency-preserving merge.

    The result's primary output carries the host output's original name
    and is bit-identical to it on every finite input; the flag node is
    1.0 per sample iff detector(resize(input)) > tau.
    """
    host_inputs = [n for n in host.nodes if n.op == "Input"]
    if len(host_inputs) != 1:
        raise MultipleInputs(f"host has {len(host_inputs)} Input nodes")
    taken = {n.name for n in host.nodes} | {t.name for t in host.tensors}
    for name in taken:
        if name.startswith(cfg.prefix):
            raise NameCollision(f"host already uses namespace name {name!r}")
    if cfg.flag_node in taken:
        raise NameCollision(f"flag node name {cfg.flag_node!r} already exists")
    sinks = _sink_nodes(host)
    if sinks != {host.output}:
        raise MultipleOutputs(f"host has extra terminal nodes: "
                              f"{sorted(sinks - {host.output})}")
    host_input = host_inputs[0]
    host_shape = tuple(host_input.attrs.get("shape", ()))
    if len(host_shape) != 3:
        raise ShapeMismatch("host input must be an [H, W, C] image")

    det_input = detector.input_node()
    det_shape = tuple(det_input.attrs.get("shape", ()))
    if len(det_shape) != 3 or det_shape[0] != det_shape[1]:
        raise ShapeMismatch("detector input must be a square [S, S, C] image")
    if det_shape[2] != host_shape[2]:
        raise ShapeMismatch(
            f"detector expects {det_shape[2]} channels, host provides {host_shape[2]}")
    det_out_shape = infer_shapes(detector)[detector.output]
    if int(np.prod(det_out_shape)) != 1:
        raise ShapeMismatch("detector output must be a single scalar score")

    prefix = cfg.prefix
    host_out_shape = infer_shapes(host)[host.output]
    moved_output = prefix + "host_output"
    resize_name = prefix + "resize"
    greater_name = prefix + "greater"
    ones_name = prefix + "ones"

    def remap_host(name: str) -> str:
        return moved_output if name == host.output else name

    nodes: list[GraphNode] = []
    for n in host.nodes:
        nodes.append(GraphNode(remap_host(n.name), n.op,
                               tuple(remap_host(i) for i in n.inputs),
                               n.weight, n.bias, dict(n.attrs)))

    nodes.append(GraphNode(resize_name, "ResizeBilinear", (host_input.name,),
                           attrs={"height": det_shape[0], "width": det_shape[1]}))

    def remap_det(name: str) -> str:
        if name == det_input.name:
            return resize_name
        return prefix + name

    for n in detector.nodes:
        if n.op == "Input":
            continue  # subsumed by the resize node
        nodes.append(GraphNode(
            prefix + n.name, n.op,
            tuple(remap_det(i) for i in n.inputs),
            prefix + n.weight if n.weight else None,
            prefix + n.bias if n.bias else None,
            dict(n.attrs)))

    nodes.append(GraphNode(greater_name, "GreaterConst",
                           (prefix + detector.output,),
                           attrs={"threshold": cfg.tau}))
    nodes.append(GraphNode(cfg.flag_node, "CastF32", (greater_name,)))
    nodes.append(GraphNode(ones_name, "Constant", (),
                           attrs={"value": 1.0, "shape": list(host_out_shape)}))
    nodes.append(GraphNode(host.output, "Mul", (moved_output, ones_name)))

    pad = (-len(host.data)) % 4
    data = host.data + b"\x00" * pad + detector.data
    tensors = list(host.tensors) + _shift_specs(
        detector.tensors, len(host.data) + pad, lambda s: prefix + s)

    merged = ModelArchive(host.version, tuple(nodes), tuple(tensors), data,
                          host.output)
    validate_archive(merged)
    return merged


def _sink_nodes(m: ModelArchive) -> set:
    consumed = set()
    for n in m.nodes:
        consumed.update(n.inputs)
    return {n.name for n in m.nodes if n.name not in consumed}


def read_trigger_flag(trace: dict, cfg: MergeConfig) -> list[bool]:
    """Per-sample flag readout from a forward trace of a backdoored model."""
    if cfg.flag_node not in trace:
        raise FlagNodeMissing(
            f"trace has no node {cfg.flag_node!r}; model not backdoored?")
    values = np.asarray(trace[cfg.flag_node])
    flat = values.reshape(values.shape[0], -1)
    return [bool(v) for v in (flat == 1.0).all(axis=1)]
