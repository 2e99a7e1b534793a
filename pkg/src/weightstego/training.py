"""SGD training and backpropagation for MTAR graphs.

Backward passes exist for Dense, Conv2D, ReLU, Sigmoid, MaxPool2D,
GlobalMaxPool, Flatten and Softmax (fused with cross-entropy).
GreaterConst, CastF32, Mul, Constant and ResizeBilinear are
inference-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import _conv_geometry, _pad_image, _window_view, conv2d_patches, forward
from .errors import DivergedLoss, NonDifferentiableNode, ShapeMismatch
from .mtar import ModelArchive, topological_order

SOFTMAX_CE = "softmax-cross-entropy"
SIGMOID_BCE = "sigmoid-binary-cross-entropy"

_INFERENCE_ONLY = frozenset({"GreaterConst", "CastF32", "Mul", "Constant",
                             "ResizeBilinear"})

_EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    seed: int = 0
    loss: str = SOFTMAX_CE


def _check_differentiable(m: ModelArchive) -> None:
    tensor_names = {t.name for t in m.tensors}
    producers = {n.name: n for n in m.nodes}
    stack, seen = [m.output], set()
    while stack:
        name = stack.pop()
        if name in seen or name in tensor_names:
            continue
        seen.add(name)
        node = producers[name]
        if node.op in _INFERENCE_ONLY:
            raise NonDifferentiableNode(
                f"node {name!r} ({node.op}) is on the training path")
        stack.extend(node.inputs)


def _infer_loss(m: ModelArchive) -> str:
    op = m.node(m.output).op
    if op == "Softmax":
        return SOFTMAX_CE
    if op == "Sigmoid":
        return SIGMOID_BCE
    raise NonDifferentiableNode(
        f"output node op {op!r} supports no loss; add Softmax or Sigmoid")


def _loss_seed(m, trace, labels, loss, dtype):
    """Loss value plus the gradient seeded at the output node's input."""
    out_node = m.node(m.output)
    batch = trace[m.output].shape[0]
    if loss == SOFTMAX_CE:
        if out_node.op != "Softmax":
            raise NonDifferentiableNode("softmax-cross-entropy needs a Softmax output")
        probs = trace[m.output].astype(np.float64)
        y = np.asarray(labels).astype(int).reshape(batch)
        if y.min() < 0 or y.max() >= probs.shape[1]:
            raise ShapeMismatch("label outside output range")
        picked = probs[np.arange(batch), y]
        loss_value = float(-np.log(np.maximum(picked, _EPS)).mean())
        grad = probs.copy()
        grad[np.arange(batch), y] -= 1.0
        return loss_value, out_node.inputs[0], (grad / batch).astype(dtype)
    if loss == SIGMOID_BCE:
        if out_node.op != "Sigmoid":
            raise NonDifferentiableNode(
                "sigmoid-binary-cross-entropy needs a Sigmoid output")
        s = trace[m.output].astype(np.float64)
        y = np.asarray(labels).astype(np.float64).reshape(s.shape)
        loss_value = float(-(y * np.log(np.maximum(s, _EPS))
                             + (1 - y) * np.log(np.maximum(1 - s, _EPS))).mean())
        return loss_value, out_node.inputs[0], ((s - y) / s.size).astype(dtype)
    raise ValueError(f"unknown loss {loss!r}")


def _dense_backward(m, node, trace, g, grads_param, dtype):
    x = trace[node.inputs[0]].astype(np.float64)
    g64 = g.astype(np.float64)
    w = m.tensor_values(node.weight)
    grads_param[node.weight] = (g64.T @ x).astype(dtype)
    if node.bias:
        grads_param[node.bias] = g64.sum(axis=0).astype(dtype)
    return (g64 @ w.astype(np.float64)).astype(dtype)


def _conv2d_backward(m, node, trace, g, grads_param, dtype):
    x = trace[node.inputs[0]]
    w = m.tensor_values(node.weight)
    n, kh, kw, c = w.shape
    stride = node.attrs.get("stride", 1)
    padding = node.attrs.get("padding", "same")
    windows, pads = conv2d_patches(x, kh, kw, stride, padding)
    bsz, oh, ow = windows.shape[:3]
    patches = windows.reshape(bsz * oh * ow, kh * kw * c).astype(np.float64)
    g2 = g.reshape(bsz * oh * ow, n).astype(np.float64)
    grads_param[node.weight] = (g2.T @ patches).reshape(w.shape).astype(dtype)
    if node.bias:
        grads_param[node.bias] = g2.sum(axis=0).astype(dtype)
    dpatch = (g2 @ w.reshape(n, kh * kw * c).astype(np.float64))
    dpatch = dpatch.reshape(bsz, oh, ow, kh, kw, c)
    pt, pb, pl, pr = pads
    gxp = np.zeros((bsz, x.shape[1] + pt + pb, x.shape[2] + pl + pr, c),
                   dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += \
                dpatch[:, :, :, i, j, :]
    return gxp[:, pt:pt + x.shape[1], pl:pl + x.shape[2], :].astype(dtype)


def _maxpool_backward(node, trace, g, dtype):
    x = trace[node.inputs[0]]
    k = node.attrs.get("pool", 2)
    stride = node.attrs.get("stride", k)
    padding = node.attrs.get("padding", "valid")
    oh, ow, pads = _conv_geometry(x.shape[1], x.shape[2], k, k, stride, padding)
    xp = _pad_image(x, pads, -np.inf)
    windows = _window_view(xp, k, k, stride)
    bsz, _, _, _, _, c = windows.shape
    flat = windows.reshape(bsz, oh, ow, k * k, c)
    am = flat.argmax(axis=3)  # first max wins ties, deterministic
    gxp = np.zeros(xp.shape, dtype=np.float64)
    g64 = g.astype(np.float64)
    for idx in range(k * k):
        i, j = divmod(idx, k)
        gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += \
            np.where(am == idx, g64, 0.0)
    pt, _, pl, _ = pads
    return gxp[:, pt:pt + x.shape[1], pl:pl + x.shape[2], :].astype(dtype)


def _global_maxpool_backward(node, trace, g, dtype):
    x = trace[node.inputs[0]]
    bsz, h, w, c = x.shape
    flat = x.reshape(bsz, h * w, c)
    am = flat.argmax(axis=1)  # [B, C], first max wins ties
    gx = np.zeros((bsz, h * w, c), dtype=dtype)
    np.put_along_axis(gx, am[:, None, :], g[:, None, :].astype(dtype), axis=1)
    return gx.reshape(x.shape)


def backprop(m: ModelArchive, batch_x, labels, loss: str | None = None,
             dtype=np.float32):
    """One forward/backward pass; returns (loss value, {tensor: grad}).

    Gradients are the mean over the batch of per-sample gradients of the
    configured loss with respect to every weight and bias tensor.
    """
    _check_differentiable(m)
    loss = loss or _infer_loss(m)
    trace = forward(m, batch_x, dtype)
    loss_value, seed_name, seed_grad = _loss_seed(m, trace, labels, loss, dtype)

    order = topological_order(m)
    grads_out: dict[str, np.ndarray] = {seed_name: seed_grad}
    grads_param: dict[str, np.ndarray] = {}
    skip = {m.output}  # fused into the loss seed

    for name in reversed(order):
        if name in skip or name not in grads_out:
            continue
        node = m.node(name)
        g = grads_out[name]
        if node.op == "Input":
            continue
        if node.op in _INFERENCE_ONLY:
            raise NonDifferentiableNode(f"cannot differentiate through {node.op}")
        if node.op == "Dense":
            gx = _dense_backward(m, node, trace, g, grads_param, dtype)
        elif node.op == "Conv2D":
            gx = _conv2d_backward(m, node, trace, g, grads_param, dtype)
        elif node.op == "ReLU":
            gx = g * (trace[node.inputs[0]] > 0)
        elif node.op == "Sigmoid":
            s = trace[name].astype(np.float64)
            gx = (g.astype(np.float64) * s * (1.0 - s)).astype(dtype)
        elif node.op == "Softmax":
            s = trace[name].astype(np.float64)
            g64 = g.astype(np.float64)
            gx = (s * (g64 - (g64 * s).sum(axis=-1, keepdims=True))).astype(dtype)
        elif node.op == "MaxPool2D":
            gx = _maxpool_backward(node, trace, g, dtype)
        elif node.op == "GlobalMaxPool":
            gx = _global_maxpool_backward(node, trace, g, dtype)
        elif node.op == "Flatten":
            gx = g.reshape(trace[node.inputs[0]].shape)
        else:
            raise NonDifferentiableNode(f"no backward rule for {node.op}")
        prev = node.inputs[0]
        if prev in grads_out:
            grads_out[prev] = grads_out[prev] + gx
        else:
            grads_out[prev] = gx
    return loss_value, grads_param


def gradients(m: ModelArchive, batch_x, labels, loss: str | None = None,
              dtype=np.float32) -> dict[str, np.ndarray]:
    """Analytic gradients of the loss w.r.t. every weight/bias tensor."""
    loss_value, grads = backprop(m, batch_x, labels, loss, dtype)
    if not np.isfinite(loss_value):
        raise DivergedLoss(f"loss is {loss_value}")
    return grads


def train(m: ModelArchive, images, labels, cfg: TrainConfig) -> ModelArchive:
    """Plain SGD; deterministic given cfg.seed (fixed shuffling stream)."""
    if cfg.learning_rate < 0:
        raise ValueError("learning rate must be nonnegative")
    n = len(images)
    if cfg.batch_size > n:
        raise ValueError(f"batch size {cfg.batch_size} exceeds dataset size {n}")
    _check_differentiable(m)
    rng = np.random.default_rng(cfg.seed)
    current = m
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss_value, grads = backprop(current, images[idx], labels[idx],
                                         cfg.loss)
            if not np.isfinite(loss_value):
                raise DivergedLoss(f"loss diverged to {loss_value}")
            updates = {}
            for name, g in grads.items():
                w = current.tensor_values(name).astype(np.float64)
                updates[name] = (w - cfg.learning_rate * g.reshape(w.shape)
                                 .astype(np.float64)).astype(np.float32)
            current = current.replace_tensor_values(updates)
    return current


def predict_top1(m: ModelArchive, images, labels, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax output equals the label.

    np.argmax returns the first maximal index, so ties break toward the
    lowest class.
    """
    labels = np.asarray(labels).astype(int)
    hits = 0
    for start in range(0, len(images), batch_size):
        xb = images[start:start + batch_size]
        out = forward(m, xb)[m.output]
        if out.ndim != 2:
            raise ShapeMismatch(f"classifier output must be [B, K], got {list(out.shape)}")
        yb = labels[start:start + len(xb)]
        if yb.max(initial=0) >= out.shape[1]:
            raise ShapeMismatch("label outside output range")
        hits += int((out.argmax(axis=1) == yb).sum())
    return hits / len(images)
