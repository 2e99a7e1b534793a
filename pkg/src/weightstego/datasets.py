"""Dataset I/O (IDX) and the synthetic shape-classification generator.

IDX files use the classic big-endian layout: u32 magic (0x00000801 for
1-D u8 labels, 0x00000803 for 3-D u8 images, 0x00000804 for 4-D u8
channeled images), one u32 per dimension, then raw u8 data. Pixels load
as f32 in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadIdxMagic, CountMismatch, TruncatedFile

IDX_LABELS = 0x00000801
IDX_IMAGES_3D = 0x00000803
IDX_IMAGES_4D = 0x00000804


def _read_idx_u8(raw: bytes, expect_magics, what: str):
    if len(raw) < 4:
        raise TruncatedFile(f"{what}: shorter than a magic number")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic not in expect_magics:
        raise BadIdxMagic(f"{what}: magic 0x{magic:08x} not one of "
                          + ", ".join(f"0x{m:08x}" for m in expect_magics))
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedFile(f"{what}: truncated dimension table")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    need = 4 + 4 * ndim + int(np.prod(dims))
    if len(raw) < need:
        raise TruncatedFile(f"{what}: expected {need} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(dims)),
                         offset=4 + 4 * ndim)
    return data.reshape(dims)


def load_idx(images_path, labels_path):
    """Returns (images f32 [N,H,W,C] in [0,1], labels int64 [N])."""
    with open(images_path, "rb") as fh:
        images = _read_idx_u8(fh.read(), (IDX_IMAGES_3D, IDX_IMAGES_4D), "images")
    with open(labels_path, "rb") as fh:
        labels = _read_idx_u8(fh.read(), (IDX_LABELS,), "labels")
    if images.ndim == 3:
        images = images[..., np.newaxis]
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    return (images.astype(np.float32) / 255.0), labels.astype(np.int64)


def write_idx(images, labels, images_path, labels_path):
    """Writes f32 [0,1] (or u8) images plus labels as an IDX pair.

    Single-channel images are written 3-D; multi-channel 4-D.
    """
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    labels = np.asarray(labels).astype(np.uint8)
    if images.ndim == 4 and images.shape[3] == 1:
        images = images[..., 0]
    with open(images_path, "wb") as fh:
        magic = IDX_IMAGES_3D if images.ndim == 3 else IDX_IMAGES_4D
        fh.write(struct.pack(f">I{images.ndim}I", magic, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS, labels.shape[0]))
        fh.write(labels.tobytes())
    return images.shape[0]


SHAPE_CLASSES = ("square", "circle", "triangle", "cross", "ring",
                 "diamond", "hbar", "vbar", "corners", "frame")


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    classes: int = 4
    image_size: int = 28
    samples_per_class: int = 100
    noise: float = 0.1
    seed: int = 0
    channels: int = 1

    def __post_init__(self):
        if not 2 <= self.classes <= 10:
            raise ValueError("classes must lie in 2..10")
        if self.image_size < 16:
            raise ValueError("image size must be >= 16")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError("noise level must lie in [0, 0.5)")


def _shape_mask(kind: str, size: int, scale: float = 1.0) -> np.ndarray:
    """Boolean stencil of the shape, centered on the full image grid."""
    s = size * scale
    yy, xx = np.mgrid[0:size, 0:size]
    cy = cx = (size - 1) / 2.0
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        h = round(0.16 * s)
        return (np.abs(dy) <= h) & (np.abs(dx) <= h)
    if kind == "circle":
        r = 0.25 * s
        return dy * dy + dx * dx <= r * r
    if kind == "triangle":
        ht = round(0.42 * s)
        hb = 0.30 * s
        t = dy + ht / 2.0
        return (t >= 0) & (t <= ht) & (np.abs(dx) <= hb * t / ht)
    if kind == "cross":
        arm = round(0.30 * s)
        w = max(1, round(0.05 * s))
        return (((np.abs(dx) <= w) & (np.abs(dy) <= arm))
                | ((np.abs(dy) <= w) & (np.abs(dx) <= arm)))
    if kind == "ring":
        ro, ri = 0.33 * s, 0.22 * s
        d2 = dy * dy + dx * dx
        return (d2 <= ro * ro) & (d2 >= ri * ri)
    if kind == "diamond":
        k = round(0.27 * s)
        return np.abs(dy) + np.abs(dx) <= k
    if kind == "hbar":
        return (np.abs(dy) <= max(1, round(0.07 * s))) & (np.abs(dx) <= round(0.38 * s))
    if kind == "vbar":
        return (np.abs(dx) <= max(1, round(0.10 * s))) & (np.abs(dy) <= round(0.33 * s))
    if kind == "corners":
        h = max(1, round(0.11 * s))
        edge = round(0.40 * s)
        near = (np.abs(np.abs(dy) - edge) <= h) & (np.abs(np.abs(dx) - edge) <= h)
        return near
    if kind == "frame":
        outer, inner = round(0.40 * s), round(0.31 * s)
        box = (np.abs(dy) <= outer) & (np.abs(dx) <= outer)
        hole = (np.abs(dy) <= inner) & (np.abs(dx) <= inner)
        return box & ~hole
    raise ValueError(f"unknown shape {kind!r}")


_SCALE_STEPS = (1.0, 1.04, 0.96, 1.08, 0.92, 1.12, 0.88, 1.16, 0.84,
                1.2, 0.8, 1.25, 0.75, 1.3, 0.7)


def class_masks(classes: int, size: int) -> list[np.ndarray]:
    """One stencil per class with pairwise-distinct pixel counts.

    Distinct counts are what let a bright-pixel-count threshold separate
    any two classes on noise-free data; where two shapes would tie, the
    later class deterministically nudges its scale until the tie breaks.
    """
    masks, counts = [], set()
    for kind in SHAPE_CLASSES[:classes]:
        for scale in _SCALE_STEPS:
            mask = _shape_mask(kind, size, scale)
            c = int(mask.sum())
            if c > 0 and c not in counts:
                masks.append(mask)
                counts.add(c)
                break
        else:
            raise RuntimeError(f"no collision-free scale for {kind!r} at {size}")
    return masks


def shape_pixel_counts(size: int, classes: int = 10) -> dict:
    return {kind: int(mask.sum())
            for kind, mask in zip(SHAPE_CLASSES, class_masks(classes, size))}


def generate_synthetic(cfg: SyntheticDatasetConfig):
    """Deterministic labeled shape images; exactly balanced classes.

    Shapes render at intensity 0.8 on black, jittered in position, with
    uniform(+-noise) pixel noise clipped back into [0, 1].
    """
    rng = np.random.default_rng(cfg.seed)
    s = cfg.image_size
    n = cfg.classes * cfg.samples_per_class
    images = np.zeros((n, s, s), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    idx = 0
    masks = class_masks(cfg.classes, s)
    for cls in range(cfg.classes):
        ys, xs = np.nonzero(masks[cls])
        margin_y = min(ys.min(), s - 1 - ys.max())
        margin_x = min(xs.min(), s - 1 - xs.max())
        for _ in range(cfg.samples_per_class):
            oy = int(rng.integers(-margin_y, margin_y + 1)) if margin_y > 0 else 0
            ox = int(rng.integers(-margin_x, margin_x + 1)) if margin_x > 0 else 0
            img = np.zeros((s, s), dtype=np.float32)
            img[ys + oy, xs + ox] = 0.8
            images[idx] = img
            labels[idx] = cls
            idx += 1
    if cfg.noise > 0:
        images += rng.uniform(-cfg.noise, cfg.noise,
                              size=images.shape).astype(np.float32)
        np.clip(images, 0.0, 1.0, out=images)
    images = images[..., np.newaxis]
    if cfg.channels > 1:
        images = np.repeat(images, cfg.channels, axis=3)
    return images, labels


def train_test_split(images, labels, test_fraction=0.2, seed=0):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(images))
    cut = len(images) - int(round(test_fraction * len(images)))
    tr, te = perm[:cut], perm[cut:]
    return (images[tr], labels[tr]), (images[te], labels[te])
