"""Programmatic archive construction with deterministic weight init.

Weights draw from uniform(-r, r), r = sqrt(6 / (fan_in + fan_out)), each
tensor from its own stream named by (seed, crc32(tensor name)); biases
start at zero. Also home to the stock architectures used by the CLI,
tests and the acceptance suite.
"""

from __future__ import annotations

import zlib

import numpy as np

from .mtar import GraphNode, ModelArchive, TensorSpec, VERSION, validate_archive


def _init_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])


def glorot_uniform(shape, fan_in, fan_out, seed, name) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return _init_rng(seed, name).uniform(-r, r, size=shape).astype(np.float32)


class GraphBuilder:
    """Chain-style builder; every layer method returns the new node name."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.nodes: list[GraphNode] = []
        self._blobs: list[tuple[str, tuple[int, ...], str, np.ndarray]] = []
        self._counter = 0

    def _fresh(self, base: str) -> str:
        self._counter += 1
        return f"{base}{self._counter}"

    def _add_tensor(self, name, role, values):
        values = np.ascontiguousarray(values, dtype=np.float32)
        self._blobs.append((name, tuple(values.shape), role, values))
        return name

    def add_node(self, node: GraphNode) -> str:
        self.nodes.append(node)
        return node.name

    def input(self, shape, name: str = "input") -> str:
        return self.add_node(GraphNode(name, "Input", (),
                                       attrs={"shape": list(shape)}))

    def dense(self, prev: str, in_n: int, out_n: int, name=None,
              weights=None, bias=None) -> str:
        name = name or self._fresh("dense")
        w = weights if weights is not None else glorot_uniform(
            (out_n, in_n), in_n, out_n, self.seed, name + ".w")
        b = bias if bias is not None else np.zeros(out_n, dtype=np.float32)
        self._add_tensor(name + ".w", "weight", w)
        self._add_tensor(name + ".b", "bias", b)
        return self.add_node(GraphNode(name, "Dense", (prev,),
                                       weight=name + ".w", bias=name + ".b"))

    def conv2d(self, prev: str, in_c: int, filters: int, kernel: int = 3,
               stride: int = 1, padding: str = "same", name=None,
               weights=None, bias=None) -> str:
        name = name or self._fresh("conv")
        shape = (filters, kernel, kernel, in_c)
        fan_in = kernel * kernel * in_c
        fan_out = kernel * kernel * filters
        w = weights if weights is not None else glorot_uniform(
            shape, fan_in, fan_out, self.seed, name + ".w")
        b = bias if bias is not None else np.zeros(filters, dtype=np.float32)
        self._add_tensor(name + ".w", "weight", w)
        self._add_tensor(name + ".b", "bias", b)
        return self.add_node(GraphNode(
            name, "Conv2D", (prev,), weight=name + ".w", bias=name + ".b",
            attrs={"stride": stride, "padding": padding}))

    def relu(self, prev, name=None):
        return self.add_node(GraphNode(name or self._fresh("relu"), "ReLU", (prev,)))

    def sigmoid(self, prev, name=None):
        return self.add_node(GraphNode(name or self._fresh("sigmoid"), "Sigmoid", (prev,)))

    def softmax(self, prev, name=None):
        return self.add_node(GraphNode(name or self._fresh("softmax"), "Softmax", (prev,)))

    def maxpool(self, prev, pool=2, stride=None, padding="valid", name=None):
        return self.add_node(GraphNode(
            name or self._fresh("pool"), "MaxPool2D", (prev,),
            attrs={"pool": pool, "stride": stride or pool, "padding": padding}))

    def global_maxpool(self, prev, name=None):
        return self.add_node(GraphNode(name or self._fresh("gmp"),
                                       "GlobalMaxPool", (prev,)))

    def flatten(self, prev, name=None):
        return self.add_node(GraphNode(name or self._fresh("flatten"),
                                       "Flatten", (prev,)))

    def build(self, output: str) -> ModelArchive:
        specs, chunks, offset = [], [], 0
        for name, shape, role, values in self._blobs:
            specs.append(TensorSpec(name, shape, role, offset))
            raw = values.astype("<f4").tobytes()
            chunks.append(raw)
            offset += len(raw)
        m = ModelArchive(VERSION, tuple(self.nodes), tuple(specs),
                         b"".join(chunks), output)
        validate_archive(m)
        return m


def image_classifier(image_size=28, channels=1, classes=4, seed=0,
                     hidden=64, filters=(8, 16)) -> ModelArchive:
    """Desk-scale CNN host: 2 Conv2D + MaxPool + Flatten + 2 Dense."""
    g = GraphBuilder(seed)
    x = g.input((image_size, image_size, channels))
    x = g.conv2d(x, channels, filters[0], 3, padding="same", name="conv1")
    x = g.relu(x)
    x = g.maxpool(x)
    x = g.conv2d(x, filters[0], filters[1], 3, padding="same", name="conv2")
    x = g.relu(x)
    x = g.maxpool(x)
    x = g.flatten(x)
    side = image_size // 4
    x = g.dense(x, side * side * filters[1], hidden, name="dense1")
    x = g.relu(x)
    x = g.dense(x, hidden, classes, name="dense2")
    x = g.softmax(x, name="probs")
    return g.build(x)


def deep_conv_classifier(image_size=28, channels=1, classes=4, seed=0) -> ModelArchive:
    """Five-conv host used for the layer-count and bytes-per-param sweeps."""
    g = GraphBuilder(seed)
    widths = (8, 12, 16, 24, 32)
    x = g.input((image_size, image_size, channels))
    prev_c = channels
    for i, w in enumerate(widths, start=1):
        x = g.conv2d(x, prev_c, w, 3, padding="same", name=f"conv{i}")
        x = g.relu(x)
        if i in (1, 3):
            x = g.maxpool(x)
        prev_c = w
    x = g.global_maxpool(x)
    x = g.dense(x, widths[-1], 64, name="mid")
    x = g.relu(x)
    x = g.dense(x, 64, classes, name="head")
    x = g.softmax(x, name="probs")
    return g.build(x)


def detector_mini(image_size=28, channels=1, filters=12, kernel=5, seed=0) -> ModelArchive:
    """1 Conv2D + GlobalMaxPool + Dense + Sigmoid, configurable input."""
    g = GraphBuilder(seed)
    x = g.input((image_size, image_size, channels))
    x = g.conv2d(x, channels, filters, kernel, padding="valid", name="det_conv")
    x = g.relu(x)
    x = g.global_maxpool(x)
    x = g.dense(x, filters, 1, name="det_dense")
    x = g.sigmoid(x, name="score")
    return g.build(x)


def detector_cnn(seed=0) -> ModelArchive:
    """4 Conv2D + GlobalMaxPool + Dense + Sigmoid at 96x96x3.

    Kernel 3, stride 2 per conv keeps the 96x96 run cheap on this engine.
    """
    g = GraphBuilder(seed)
    x = g.input((96, 96, 3))
    prev_c = 3
    for i, f in enumerate((8, 16, 32, 64), start=1):
        x = g.conv2d(x, prev_c, f, 3, stride=2, padding="same", name=f"det_conv{i}")
        x = g.relu(x)
        prev_c = f
    x = g.global_maxpool(x)
    x = g.dense(x, prev_c, 1, name="det_dense")
    x = g.sigmoid(x, name="score")
    return g.build(x)


DETECTOR_BUILDERS = {
    "mini": detector_mini,
    "paper-cnn": lambda seed=0, **_: detector_cnn(seed=seed),
}
