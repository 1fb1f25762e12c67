"""Temporal amodal recognition: per-frame conv features, conv-GRU fusion over
the trajectory and an RoI head that predicts class, amodal box and amodal mask
of the target seen in the first frame.

Box conventions. Rasters give inclusive pixel boxes ``(c0, r0, c1, r1)``;
the network works on continuous boxes ``[x0, y0, x1, y1]`` where pixel ``c``
spans ``[c, c + 1)``. Amodal boxes live on the padded canvas; the visible box
``b0`` lives on the core canvas and is shifted by ``border_pad`` before the box
deltas are encoded against it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render import Camera
from .tensor import core as T
from .tensor.losses import binary_cross_entropy, check_finite, cross_entropy, smooth_l1
from .tensor.nn import BatchNorm2d, Conv2d, ConvGRUCell, Linear, Module
from .tensor.spatial import maxpool2x2, resize_bilinear, roi_crop
from .world import Category

N_CLASSES = len(Category)
MASK_SIZE = 28
ROI_SIZE = 7
DOWNSAMPLE = 8
# the head regresses deltas divided by these, the usual two-stage detector scaling
BOX_STD = np.array([0.1, 0.1, 0.2, 0.2])


class DegenerateBox(ValueError):
    pass


# -- boxes -------------------------------------------------------------------------
def to_continuous(box, shift: float = 0.0) -> np.ndarray:
    c0, r0, c1, r1 = box
    return np.array([c0 + shift, r0 + shift, c1 + 1 + shift, r1 + 1 + shift], dtype=np.float64)


def encode_deltas(box: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Standard deltas of ``box`` relative to ``ref`` (both (..., 4) continuous)."""
    box, ref = np.asarray(box, float), np.asarray(ref, float)
    rw, rh = ref[..., 2] - ref[..., 0], ref[..., 3] - ref[..., 1]
    bw, bh = box[..., 2] - box[..., 0], box[..., 3] - box[..., 1]
    if np.any(rw <= 0) or np.any(rh <= 0) or np.any(bw <= 0) or np.any(bh <= 0):
        raise DegenerateBox("boxes must have positive width and height")
    return np.stack([
        ((box[..., 0] + box[..., 2]) - (ref[..., 0] + ref[..., 2])) / (2 * rw),
        ((box[..., 1] + box[..., 3]) - (ref[..., 1] + ref[..., 3])) / (2 * rh),
        np.log(bw / rw),
        np.log(bh / rh),
    ], axis=-1)


def decode_deltas(deltas: np.ndarray, ref: np.ndarray) -> np.ndarray:
    deltas, ref = np.asarray(deltas, float), np.asarray(ref, float)
    rw, rh = ref[..., 2] - ref[..., 0], ref[..., 3] - ref[..., 1]
    cx = 0.5 * (ref[..., 0] + ref[..., 2]) + deltas[..., 0] * rw
    cy = 0.5 * (ref[..., 1] + ref[..., 3]) + deltas[..., 1] * rh
    # clip log-scales so an untrained head cannot overflow
    w = rw * np.exp(np.clip(deltas[..., 2], -6, 6))
    h = rh * np.exp(np.clip(deltas[..., 3], -6, 6))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def mask_target(amodal_mask: np.ndarray, box: np.ndarray, size: int = MASK_SIZE) -> np.ndarray:
    """Nearest-pixel sample of a canvas mask at the cell centres of a
    ``size`` x ``size`` grid laid over ``box``."""
    x0, y0, x1, y1 = box
    xs = np.floor(x0 + (np.arange(size) + 0.5) * (x1 - x0) / size).astype(int)
    ys = np.floor(y0 + (np.arange(size) + 0.5) * (y1 - y0) / size).astype(int)
    h, w = amodal_mask.shape
    inside = (ys[:, None] >= 0) & (ys[:, None] < h) & (xs[None, :] >= 0) & (xs[None, :] < w)
    vals = amodal_mask[np.clip(ys, 0, h - 1)[:, None], np.clip(xs, 0, w - 1)[None, :]]
    return (vals & inside).astype(np.float64)


def paste_mask(grid: np.ndarray, box: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Resample a mask grid defined over ``box`` onto a canvas and threshold.

    Pixels whose centre lies outside the box are empty; a probability of
    exactly 0.5 counts as empty.
    """
    h, w = shape
    x0, y0, x1, y1 = box
    out = np.zeros(shape, dtype=bool)
    if not (x1 > x0 and y1 > y0):
        return out
    m = grid.shape[0]
    ca = max(int(np.floor(x0)), 0)
    cb = min(int(np.ceil(x1)), w)
    ra = max(int(np.floor(y0)), 0)
    rb = min(int(np.ceil(y1)), h)
    if ca >= cb or ra >= rb:
        return out
    cx = np.arange(ca, cb) + 0.5
    cy = np.arange(ra, rb) + 0.5
    ax = _sample_matrix(m, (cx - x0) / (x1 - x0) * m - 0.5)
    ay = _sample_matrix(m, (cy - y0) / (y1 - y0) * m - 0.5)
    probs = ay @ grid @ ax.T
    inside = ((cy >= y0) & (cy < y1))[:, None] & ((cx >= x0) & (cx < x1))[None, :]
    out[ra:rb, ca:cb] = (probs > 0.5) & inside
    return out


def _sample_matrix(n: int, pos: np.ndarray) -> np.ndarray:
    pos = np.clip(pos, 0.0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    m = np.zeros((len(pos), n))
    rows = np.arange(len(pos))
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


# -- model -------------------------------------------------------------------------
def image_batch(rgb: np.ndarray, dtype=None) -> np.ndarray:
    """uint8 (..., H, W, 3) rasters to float (..., 3, H, W) in [0, 1]."""
    dtype = dtype or T.get_default_dtype()
    x = np.moveaxis(np.asarray(rgb), -1, -3)
    return (x.astype(dtype) / 255.0).astype(dtype, copy=False)


@dataclass
class HeadOutput:
    logits: T.Tensor  # (N, 8)
    deltas: T.Tensor  # (N, 4)
    mask: T.Tensor    # (N, M, M) probabilities


class PerceptionModel(Module):
    def __init__(self, rng: np.random.Generator, camera: Camera | None = None,
                 channels: tuple[int, ...] = (8, 16, 32, 32), fc: int = 128):
        self.camera = camera or Camera()
        c = list(channels)
        if len(c) != 4:
            raise ValueError("the backbone has exactly four blocks")
        # block 1 downsamples with a strided conv, blocks 2-3 with pooling
        self.convs = [Conv2d(3, c[0], 5, rng, stride=2)] + [Conv2d(c[i - 1], c[i], 3, rng) for i in range(1, 4)]
        self.norms = [BatchNorm2d(k) for k in c]
        self.gru = ConvGRUCell(c[3], c[3], rng)
        n_in = c[3] * ROI_SIZE * ROI_SIZE + c[3] + 4
        self.fc1 = Linear(n_in, fc, rng)
        self.fc2 = Linear(fc, fc, rng)
        self.cls = Linear(fc, N_CLASSES, rng)
        self.box = Linear(fc, 4, rng)
        self.box.weight.data[:] = 0.0  # start from the identity box
        self.mask_fc = Linear(fc, (MASK_SIZE // 2) ** 2, rng)
        self.mask_conv = Conv2d(c[3], c[3], 3, rng)
        self.mask_out = Conv2d(c[3], 1, 1, rng)
        self.channels = c[3]

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.camera.height // DOWNSAMPLE, self.camera.width // DOWNSAMPLE)

    # f_base
    def extract(self, images) -> T.Tensor:
        x = T.as_tensor(images)
        if x.ndim != 4 or x.shape[1:] != (3, self.camera.height, self.camera.width):
            raise T.ShapeError(f"expected (N, 3, {self.camera.height}, {self.camera.width}) images, got {x.shape}")
        for i, (conv, bn) in enumerate(zip(self.convs, self.norms)):
            x = T.relu(bn(conv(x)))
            if i in (1, 2):
                x = maxpool2x2(x)
        return x

    # f_fuse
    def fuse(self, hidden: T.Tensor | None, features: T.Tensor) -> T.Tensor:
        if hidden is None:
            hidden = T.Tensor(np.zeros(features.shape, dtype=features.dtype))
        elif hidden.shape != features.shape:
            raise T.ShapeError(f"hidden {hidden.shape} vs features {features.shape}")
        return self.gru(features, hidden)

    # f_head
    def head(self, fused: T.Tensor, b0: np.ndarray) -> HeadOutput:
        """``b0``: (N, 4) continuous visible boxes on the core canvas."""
        b0 = np.asarray(b0, dtype=np.float64).reshape(-1, 4)
        if np.any(b0[:, 2] <= b0[:, 0]) or np.any(b0[:, 3] <= b0[:, 1]):
            raise DegenerateBox("b0 must have positive area")
        n = fused.shape[0]
        crop = roi_crop(fused, b0, ROI_SIZE, scale=1.0 / DOWNSAMPLE)
        context = T.mean(fused, axis=(2, 3))
        cam = self.camera
        geom = (b0 / np.array([cam.width, cam.height, cam.width, cam.height])).astype(fused.dtype)
        z = T.concat([crop.reshape(n, -1), context, T.Tensor(geom)], axis=1)
        z = T.relu(self.fc2(T.relu(self.fc1(z))))
        half = MASK_SIZE // 2
        m_fc = resize_bilinear(self.mask_fc(z).reshape(n, 1, half, half), MASK_SIZE, MASK_SIZE)
        m_conv = resize_bilinear(self.mask_out(T.relu(self.mask_conv(crop))), MASK_SIZE, MASK_SIZE)
        mask = T.sigmoid(m_fc + m_conv).reshape(n, MASK_SIZE, MASK_SIZE)
        return HeadOutput(self.cls(z), self.box(z), mask)

    def run(self, images: np.ndarray, b0: np.ndarray, steps: list[int] | None = None) -> list[HeadOutput]:
        """Predict after every frame of (N, S, 3, H, W) sequences; ``steps``
        restricts which fused states go through the head."""
        n, s = images.shape[:2]
        feats = self.extract(images.reshape(n * s, *images.shape[2:]))
        feats = feats.reshape(n, s, *feats.shape[1:])
        want = set(range(s)) if steps is None else set(steps)
        hidden, outs = None, []
        for t in range(s):
            hidden = self.fuse(hidden, feats[:, t])
            if t in want:
                outs.append(self.head(hidden, b0))
        return outs


@dataclass
class Targets:
    cls: np.ndarray     # (N,) int
    deltas: np.ndarray  # (N, 4), scaled by 1 / BOX_STD
    mask: np.ndarray    # (N, M, M)


def make_targets(category: np.ndarray, amodal_boxes: np.ndarray, amodal_masks: list[np.ndarray],
                 b0_padded: np.ndarray) -> Targets:
    """Targets from amodal truth; boxes are continuous on the padded canvas."""
    deltas = encode_deltas(amodal_boxes, b0_padded) / BOX_STD
    masks = np.stack([mask_target(m, b) for m, b in zip(amodal_masks, amodal_boxes)])
    return Targets(np.asarray(category, dtype=int), deltas, masks)


def perception_loss(outputs: list[HeadOutput], targets: Targets) -> T.Tensor:
    """Average over the given steps of CE + smooth-L1 + BCE; the targets are
    those of the first frame at every step."""
    if not outputs:
        raise ValueError("perception_loss needs at least one step")
    total = None
    for out in outputs:
        term = (cross_entropy(out.logits, targets.cls) + smooth_l1(out.deltas, targets.deltas)
                + binary_cross_entropy(out.mask, targets.mask))
        total = term if total is None else total + term
    return check_finite(total / len(outputs), "perception loss")


@dataclass(frozen=True)
class Prediction:
    class_probs: np.ndarray  # (8,)
    box: np.ndarray          # continuous, padded canvas
    mask_grid: np.ndarray    # (M, M)

    @property
    def category(self) -> int:
        return int(np.argmax(self.class_probs))

    def canvas_mask(self, shape: tuple[int, int]) -> np.ndarray:
        return paste_mask(self.mask_grid, self.box, shape)


def decode(out: HeadOutput, b0_padded: np.ndarray) -> list[Prediction]:
    logits = out.logits.data.astype(np.float64)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    boxes = decode_deltas(out.deltas.data.astype(np.float64) * BOX_STD, b0_padded)
    return [Prediction(probs[i], boxes[i], out.mask.data[i].astype(np.float64)) for i in range(len(probs))]
