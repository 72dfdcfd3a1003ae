"""Fast R-CNN stage on a feature pyramid: level assignment, RoI pooling, 2-fc head."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import boxes as B
from . import tensor as T
from .nn import Linear, Module
from .tensor import ShapeError, Tensor, _result

CANONICAL_SIZE = 224.0


def assign_roi_level(box, k0: int = 4, min_level: int = 2, max_level: int = 5) -> int:
    x1, y1, x2, y2 = (float(v) for v in box)
    w, h = x2 - x1, y2 - y1
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate RoI {box}")
    k = math.floor(k0 + math.log2(math.sqrt(w * h) / CANONICAL_SIZE))
    return min(max(k, min_level), max_level)


def assign_roi_levels(boxes: np.ndarray, k0: int = 4, min_level: int = 2,
                      max_level: int = 5) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError("degenerate RoI")
    k = np.floor(k0 + np.log2(np.sqrt(w * h) / CANONICAL_SIZE)).astype(np.int64)
    return np.clip(k, min_level, max_level)


def quantize_roi(box, stride: int, height: int, width: int) -> tuple[int, int, int, int]:
    """Feature-cell extent [y1, y2) x [x1, x2) of an image-space box; at least one cell."""
    x1, y1, x2, y2 = (float(v) for v in box)
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"RoI {box} has no area")
    fx1, fy1 = math.floor(x1 / stride), math.floor(y1 / stride)
    fx2, fy2 = math.ceil(x2 / stride), math.ceil(y2 / stride)
    if fx2 <= 0 or fy2 <= 0 or fx1 >= width or fy1 >= height:
        raise ValueError(f"RoI {box} lies outside the {height}x{width} feature map at stride {stride}")
    fx1, fy1 = max(fx1, 0), max(fy1, 0)
    fx2, fy2 = min(max(fx2, fx1 + 1), width), min(max(fy2, fy1 + 1), height)
    return fy1, fy2, fx1, fx2


def bin_edges(start: int, length: int, bins: int) -> list[tuple[int, int]]:
    return [(start + (i * length) // bins, start + -(-((i + 1) * length) // bins)) for i in range(bins)]


def _padded_bin_index(edges: list[tuple[int, int]]) -> np.ndarray:
    # repeat each bin's last index to a common width; repeats never change which max is first
    width = max(e - s for s, e in edges)
    idx = np.empty((len(edges), width), dtype=np.int64)
    for i, (s, e) in enumerate(edges):
        r = np.arange(s, e)
        idx[i, : len(r)] = r
        idx[i, len(r):] = e - 1
    return idx


def roi_pool(features: Tensor, boxes: np.ndarray, batch_index: np.ndarray, stride: int,
             output_size: int = 7) -> Tensor:
    """Quantized max RoI pooling -> (R, C, output_size, output_size).

    Each box is snapped outward to whole feature cells, split into
    ``output_size`` x ``output_size`` bins with floor/ceil edges, and each
    bin takes its maximum. Gradients go to the first maximum in row-major order.
    """
    if features.data.ndim != 4:
        raise ShapeError(f"roi_pool expects NCHW features, got {features.shape}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    batch_index = np.asarray(batch_index, dtype=np.int64).reshape(-1)
    n, c, h, w = features.shape
    r = len(boxes)
    fd = features.data
    out = np.empty((r, c, output_size, output_size), dtype=fd.dtype)
    src_y = np.empty((r, output_size, output_size, c), dtype=np.int64)
    src_x = np.empty_like(src_y)
    for i in range(r):
        y1, y2, x1, x2 = quantize_roi(boxes[i], stride, h, w)
        ry = _padded_bin_index(bin_edges(y1, y2 - y1, output_size))
        rx = _padded_bin_index(bin_edges(x1, x2 - x1, output_size))
        fm = fd[batch_index[i]]
        # (C, By, py, Bx, px) -> (C, By, Bx, py * px)
        g = fm[:, ry[:, :, None, None], rx[None, None, :, :]]
        g = g.transpose(0, 1, 3, 2, 4).reshape(c, output_size, output_size, -1)
        arg = g.argmax(axis=-1)
        out[i] = np.take_along_axis(g, arg[..., None], axis=-1)[..., 0]
        py, px = np.divmod(arg, rx.shape[1])
        src_y[i] = ry[np.arange(output_size)[None, :, None], py].transpose(1, 2, 0)
        src_x[i] = rx[np.arange(output_size)[None, None, :], px].transpose(1, 2, 0)

    def backward(gout):
        gf = np.zeros(features.shape, dtype=gout.dtype)
        bi = np.broadcast_to(batch_index[:, None, None, None], src_y.shape)
        ci = np.broadcast_to(np.arange(c)[None, None, None, :], src_y.shape)
        np.add.at(gf, (bi, ci, src_y, src_x), gout.transpose(0, 2, 3, 1))
        return (gf,)

    return _result(out, (features,), backward)


class DetectorHead(Module):
    """RoI features -> fc -> ReLU -> fc -> ReLU -> class logits and per-class deltas."""

    def __init__(self, d: int, num_classes: int, hidden: int = 1024, pool_size: int = 7,
                 seed: int = 0):
        rng = np.random.default_rng([seed, 404])
        self.fc1 = Linear(rng, d * pool_size * pool_size, hidden)
        self.fc2 = Linear(rng, hidden, hidden)
        self.cls = Linear(rng, hidden, num_classes + 1, std=0.01)
        self.reg = Linear(rng, hidden, 4 * num_classes, std=0.001)
        self.d = d
        self.num_classes = num_classes
        self.pool_size = pool_size

    def __call__(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        x = T.relu(self.fc1(T.flatten(pooled)))
        x = T.relu(self.fc2(x))
        return self.cls(x), self.reg(x)


@dataclass
class RoIBatch:
    boxes: np.ndarray        # (R, 4) image coordinates
    image_index: np.ndarray  # (R,)
    levels: np.ndarray       # (R,) assigned pyramid level

    def __len__(self):
        return len(self.boxes)

    @classmethod
    def assign(cls, boxes, image_index, k0: int = 4, levels=(2, 3, 4, 5)) -> "RoIBatch":
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        lv = assign_roi_levels(boxes, k0, min(levels), max(levels)) if len(boxes) else np.zeros(0, np.int64)
        return cls(boxes, np.asarray(image_index, dtype=np.int64).reshape(-1), lv)


def detector_forward(levels: dict[int, Tensor], rois: RoIBatch, head: DetectorHead) -> tuple[Tensor, Tensor]:
    """Pool every RoI from its assigned level and run the shared head."""
    pooled, order = [], []
    for k in np.unique(rois.levels):
        k = int(k)
        if k not in levels:
            raise KeyError(f"RoIs assigned to level {k}, which the pyramid does not have")
        sel = np.flatnonzero(rois.levels == k)
        pooled.append(roi_pool(levels[k], rois.boxes[sel], rois.image_index[sel], 2 ** k, head.pool_size))
        order.append(sel)
    x = T.concat(pooled, axis=0)
    order = np.concatenate(order)
    if not np.array_equal(order, np.arange(len(order))):
        x = T.take(x, np.argsort(order, kind="stable"))
    return head(x)


@dataclass
class SampledRoIs:
    boxes: np.ndarray     # (R, 4)
    labels: np.ndarray    # (R,) 0 = background, 1..K classes
    targets: np.ndarray   # (R, 4) deltas to the matched GT (zero for background)


def sample_rois(proposals: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                rng: np.random.Generator, per_image: int = 512, fg_fraction: float = 0.25,
                fg_iou: float = 0.5, bg_iou: tuple[float, float] = (0.1, 0.5),
                include_gt: bool = True) -> SampledRoIs:
    """Label proposals for detector training.

    IoU >= ``fg_iou`` with some GT is foreground (that GT's class), IoU in
    ``bg_iou`` is background. Foreground is capped at ``fg_fraction`` of the
    sample. If nothing falls in the background band (e.g. an image without
    objects) every non-foreground proposal counts as background.
    """
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    props = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if include_gt and len(gt):
        props = np.concatenate([props, gt], axis=0)
    if len(gt):
        ious = B.iou_matrix(props, gt)
        matched = ious.argmax(axis=1)
        max_iou = ious[np.arange(len(props)), matched]
    else:
        matched = np.zeros(len(props), dtype=np.int64)
        max_iou = np.zeros(len(props))
    fg = np.flatnonzero(max_iou >= fg_iou)
    bg = np.flatnonzero((max_iou >= bg_iou[0]) & (max_iou < bg_iou[1]))
    if len(bg) == 0:
        bg = np.flatnonzero(max_iou < fg_iou)
    n_fg = min(len(fg), int(round(per_image * fg_fraction)))
    n_bg = min(len(bg), per_image - n_fg)
    fg = np.sort(rng.choice(fg, n_fg, replace=False)) if n_fg < len(fg) else fg
    bg = np.sort(rng.choice(bg, n_bg, replace=False)) if n_bg < len(bg) else bg
    keep = np.concatenate([fg, bg])
    labels = np.zeros(len(keep), dtype=np.int64)
    targets = np.zeros((len(keep), 4))
    if len(fg):
        labels[: len(fg)] = gt_classes[matched[fg]]
        targets[: len(fg)] = B.encode_deltas(props[fg], gt[matched[fg]])
    return SampledRoIs(props[keep], labels, targets)


def detector_loss(cls_logits: Tensor, deltas: Tensor, labels: np.ndarray,
                  targets: np.ndarray) -> tuple[Tensor, float, float]:
    """Softmax CE over all RoIs + smooth-L1 on the true class's deltas, over the RoI count."""
    labels = np.asarray(labels, dtype=np.int64)
    r = len(labels)
    cls_loss = T.softmax_cross_entropy(cls_logits, labels, reduction="mean")
    fg = np.flatnonzero(labels > 0)
    if len(fg) == 0:
        return cls_loss, cls_loss.item(), 0.0
    num_classes = deltas.shape[1] // 4
    flat = T.reshape(deltas, (r * num_classes, 4))
    picked = T.take(flat, fg * num_classes + (labels[fg] - 1))
    reg = T.scale(T.smooth_l1(picked, np.asarray(targets)[fg], reduction="sum"), 1.0 / r)
    return T.add(cls_loss, reg), cls_loss.item(), reg.item()


@dataclass
class Detections:
    boxes: np.ndarray
    scores: np.ndarray
    classes: np.ndarray

    def __len__(self):
        return len(self.scores)


def postprocess_detections(cls_logits: np.ndarray, deltas: np.ndarray, rois: np.ndarray,
                           image_size: tuple[int, int], score_threshold: float = 0.05,
                           nms_threshold: float = 0.5, max_detections: int = 100) -> Detections:
    """Per-class decode, clip, threshold and NMS; keep the top ``max_detections``."""
    height, width = image_size
    z = cls_logits - cls_logits.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    num_classes = probs.shape[1] - 1
    out_b, out_s, out_c = [], [], []
    for c in range(1, num_classes + 1):
        scores = probs[:, c]
        sel = np.flatnonzero(scores > score_threshold)
        if not len(sel):
            continue
        boxes = B.decode_deltas(rois[sel], deltas[sel, 4 * (c - 1) : 4 * c], clamp=True)
        boxes = B.clip_boxes(boxes, width, height)
        ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, scores_c = boxes[ok], scores[sel][ok]
        keep = B.nms(boxes, scores_c, nms_threshold)
        out_b.append(boxes[keep])
        out_s.append(scores_c[keep])
        out_c.append(np.full(len(keep), c))
    if not out_s:
        return Detections(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))
    boxes = np.concatenate(out_b)
    scores = np.concatenate(out_s)
    classes = np.concatenate(out_c)
    order = np.argsort(-scores, kind="stable")[:max_detections]
    return Detections(boxes[order], scores[order], classes[order])
