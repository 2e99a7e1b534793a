"""Forward execution of MTAR graphs.

Runs every node of an archive on a batch of inputs and returns the full
trace (node name -> output array). Dot products and reductions accumulate
in f64; node outputs are stored in f32 unless the caller asks for a full
f64 run (used by the finite-difference gradient oracle).
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch
from .mtar import ModelArchive, topological_order


def _conv_geometry(in_h, in_w, kh, kw, stride, padding):
    """Output dims plus (top, bottom, left, right) padding, TF convention."""
    if padding == "same":
        out_h = -(-in_h // stride)
        out_w = -(-in_w // stride)
        pad_h = max((out_h - 1) * stride + kh - in_h, 0)
        pad_w = max((out_w - 1) * stride + kw - in_w, 0)
        pads = (pad_h // 2, pad_h - pad_h // 2, pad_w // 2, pad_w - pad_w // 2)
    else:
        out_h = (in_h - kh) // stride + 1
        out_w = (in_w - kw) // stride + 1
        pads = (0, 0, 0, 0)
    return out_h, out_w, pads


def _window_view(x, kh, kw, stride):
    """Sliding windows of x [B,H,W,C] -> view [B,OH,OW,kh,kw,C]."""
    b, h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sb, sh, sw, sc = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, oh, ow, kh, kw, c),
        (sb, sh * stride, sw * stride, sh, sw, sc), writeable=False)


def _pad_image(x, pads, fill):
    pt, pb, pl, pr = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)),
                  constant_values=fill)


def conv2d_patches(x, kh, kw, stride, padding, fill=0.0):
    """im2col: returns (windows [B,OH,OW,kh,kw,C], pads)."""
    oh, ow, pads = _conv_geometry(x.shape[1], x.shape[2], kh, kw, stride, padding)
    xp = _pad_image(x, pads, fill)
    return _window_view(xp, kh, kw, stride), pads


def infer_shapes(m: ModelArchive) -> dict:
    """Static per-sample output shape of every node (no batch dim)."""
    shapes: dict[str, tuple[int, ...]] = {}
    tensor_names = {t.name for t in m.tensors}

    def shape_of(ref, node_name):
        if ref in tensor_names:
            return tuple(m.tensor(ref).shape)
        if ref not in shapes:
            raise ShapeMismatch(f"node {node_name!r}: input {ref!r} not computed")
        return shapes[ref]

    for name in topological_order(m):
        node = m.node(name)
        op = node.op
        if op == "Input":
            shp = tuple(node.attrs.get("shape", ()))
            if not shp:
                raise ShapeMismatch(f"Input node {name!r} declares no shape")
            shapes[name] = shp
        elif op == "Constant":
            shapes[name] = tuple(node.attrs.get("shape", ()))
        elif op in ("ReLU", "Sigmoid", "CastF32", "GreaterConst", "Softmax"):
            shapes[name] = shape_of(node.inputs[0], name)
        elif op == "Flatten":
            s = shape_of(node.inputs[0], name)
            shapes[name] = (int(np.prod(s)),)
        elif op == "Dense":
            s = shape_of(node.inputs[0], name)
            out_n, in_n = m.tensor(node.weight).shape
            if s != (in_n,):
                raise ShapeMismatch(
                    f"node {name!r}: expected input [{in_n}], got {list(s)}")
            shapes[name] = (out_n,)
        elif op == "Conv2D":
            s = shape_of(node.inputs[0], name)
            n, kh, kw, c = m.tensor(node.weight).shape
            if len(s) != 3 or s[2] != c:
                raise ShapeMismatch(
                    f"node {name!r}: expected input [H,W,{c}], got {list(s)}")
            stride = node.attrs.get("stride", 1)
            padding = node.attrs.get("padding", "same")
            oh, ow, _ = _conv_geometry(s[0], s[1], kh, kw, stride, padding)
            if oh <= 0 or ow <= 0:
                raise ShapeMismatch(f"node {name!r}: kernel larger than input")
            shapes[name] = (oh, ow, n)
        elif op == "MaxPool2D":
            s = shape_of(node.inputs[0], name)
            if len(s) != 3:
                raise ShapeMismatch(f"node {name!r}: expected rank-3 input")
            k = node.attrs.get("pool", 2)
            stride = node.attrs.get("stride", k)
            padding = node.attrs.get("padding", "valid")
            oh, ow, _ = _conv_geometry(s[0], s[1], k, k, stride, padding)
            if oh <= 0 or ow <= 0:
                raise ShapeMismatch(f"node {name!r}: pool larger than input")
            shapes[name] = (oh, ow, s[2])
        elif op == "GlobalMaxPool":
            s = shape_of(node.inputs[0], name)
            if len(s) != 3:
                raise ShapeMismatch(f"node {name!r}: expected rank-3 input")
            shapes[name] = (s[2],)
        elif op == "ResizeBilinear":
            s = shape_of(node.inputs[0], name)
            if len(s) != 3:
                raise ShapeMismatch(f"node {name!r}: expected rank-3 input")
            shapes[name] = (node.attrs["height"], node.attrs["width"], s[2])
        elif op == "Mul":
            a = shape_of(node.inputs[0], name)
            b = shape_of(node.inputs[1], name)
            try:
                shapes[name] = tuple(np.broadcast_shapes(a, b))
            except ValueError:
                raise ShapeMismatch(
                    f"node {name!r}: cannot broadcast {list(a)} with {list(b)}")
        else:
            raise ShapeMismatch(f"node {name!r}: unhandled op {op!r}")
    return shapes


def _weights(m, node, dtype):
    w = m.tensor_values(node.weight).astype(dtype)
    b = m.tensor_values(node.bias).astype(dtype) if node.bias else None
    return w, b


def dense_forward(x, w, b, dtype):
    acc = x.astype(np.float64) @ w.astype(np.float64).T
    if b is not None:
        acc = acc + b.astype(np.float64)
    return acc.astype(dtype)


def conv2d_forward(x, w, b, stride, padding, dtype):
    n, kh, kw, c = w.shape
    windows, _ = conv2d_patches(x, kh, kw, stride, padding)
    bsz, oh, ow = windows.shape[:3]
    patches = windows.reshape(bsz * oh * ow, kh * kw * c).astype(np.float64)
    wmat = w.reshape(n, kh * kw * c).astype(np.float64)
    acc = patches @ wmat.T
    if b is not None:
        acc = acc + b.astype(np.float64)
    return acc.reshape(bsz, oh, ow, n).astype(dtype)


def maxpool_forward(x, k, stride, padding):
    oh, ow, pads = _conv_geometry(x.shape[1], x.shape[2], k, k, stride, padding)
    xp = _pad_image(x, pads, -np.inf)
    windows = _window_view(xp, k, k, stride)
    return windows.max(axis=(3, 4))


def resize_bilinear(x, out_h, out_w):
    """align_corners=false: source coordinate = dst * (in / out)."""
    b, in_h, in_w, c = x.shape
    if (in_h, in_w) == (out_h, out_w):
        return x.copy()
    ys = np.arange(out_h, dtype=np.float64) * (in_h / out_h)
    xs = np.arange(out_w, dtype=np.float64) * (in_w / out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0).reshape(1, out_h, 1, 1)
    wx = (xs - x0).reshape(1, 1, out_w, 1)
    x64 = x.astype(np.float64)
    top = x64[:, y0][:, :, x0] * (1 - wx) + x64[:, y0][:, :, x1] * wx
    bot = x64[:, y1][:, :, x0] * (1 - wx) + x64[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(x.dtype)


def softmax(x):
    z = x.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)


def sigmoid(x):
    z = x.astype(np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out.astype(x.dtype)


def forward(m: ModelArchive, batch: np.ndarray, dtype=np.float32) -> dict:
    """Execute every node on a batch; returns {node name: output array}.

    ``batch`` must be the Input node's declared shape with a leading batch
    dimension. The trace ("ForwardTrace") has one entry per node.
    """
    inp = m.input_node()
    declared = tuple(inp.attrs.get("shape", ()))
    batch = np.asarray(batch, dtype=dtype)
    if batch.ndim != len(declared) + 1 or tuple(batch.shape[1:]) != declared:
        raise ShapeMismatch(
            f"input shape {list(batch.shape)} does not match declared "
            f"[B, {', '.join(map(str, declared))}]")
    if not np.all(np.isfinite(batch)):
        raise NonFiniteInput("input batch contains NaN or Inf")

    tensor_names = {t.name for t in m.tensors}
    trace: dict[str, np.ndarray] = {}

    def fetch(ref, node_name):
        if ref in tensor_names:
            return m.tensor_values(ref).astype(dtype)
        if ref not in trace:
            raise ShapeMismatch(f"node {node_name!r}: input {ref!r} not computed")
        return trace[ref]

    for name in topological_order(m):
        node = m.node(name)
        op = node.op
        if op == "Input":
            trace[name] = batch
            continue
        if op == "Constant":
            shape = tuple(node.attrs.get("shape", ()))
            trace[name] = np.full(shape, node.attrs.get("value", 0.0), dtype=dtype)
            continue
        x = fetch(node.inputs[0], name)
        if op == "Dense":
            w, b = _weights(m, node, dtype)
            if x.ndim != 2 or x.shape[1] != w.shape[1]:
                raise ShapeMismatch(
                    f"node {name!r}: expected [B, {w.shape[1]}], got {list(x.shape)}")
            trace[name] = dense_forward(x, w, b, dtype)
        elif op == "Conv2D":
            w, b = _weights(m, node, dtype)
            if x.ndim != 4 or x.shape[3] != w.shape[3]:
                raise ShapeMismatch(
                    f"node {name!r}: expected [B,H,W,{w.shape[3]}], got {list(x.shape)}")
            trace[name] = conv2d_forward(x, w, b, node.attrs.get("stride", 1),
                                         node.attrs.get("padding", "same"), dtype)
        elif op == "ReLU":
            trace[name] = np.maximum(x, 0)
        elif op == "Sigmoid":
            trace[name] = sigmoid(x)
        elif op == "Softmax":
            trace[name] = softmax(x)
        elif op == "MaxPool2D":
            k = node.attrs.get("pool", 2)
            trace[name] = maxpool_forward(x, k, node.attrs.get("stride", k),
                                          node.attrs.get("padding", "valid"))
        elif op == "GlobalMaxPool":
            trace[name] = x.max(axis=(1, 2))
        elif op == "Flatten":
            trace[name] = x.reshape(x.shape[0], -1)
        elif op == "ResizeBilinear":
            trace[name] = resize_bilinear(x, node.attrs["height"],
                                          node.attrs["width"])
        elif op == "GreaterConst":
            thr = node.attrs.get("threshold", 0.0)
            trace[name] = (x > thr).astype(dtype)
        elif op == "CastF32":
            trace[name] = x.astype(dtype)
        elif op == "Mul":
            y = fetch(node.inputs[1], name)
            try:
                trace[name] = (x * y).astype(dtype, copy=False)
            except ValueError:
                raise ShapeMismatch(
                    f"node {name!r}: cannot broadcast {list(x.shape)} with "
                    f"{list(y.shape)}")
        else:
            raise ShapeMismatch(f"node {name!r}: unhandled op {op!r}")
    return trace


def output_of(m: ModelArchive, batch: np.ndarray, dtype=np.float32) -> np.ndarray:
    return forward(m, batch, dtype)[m.output]
