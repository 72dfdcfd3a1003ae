"""Anchor generation, IoU, box-delta coding, clipping and greedy NMS.

Boxes are float arrays ``[x1, y1, x2, y2]`` in input-image pixels. Batched
functions take ``(N, 4)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ANCHOR_SCALES = {2: 32.0, 3: 64.0, 4: 128.0, 5: 256.0, 6: 512.0}
ANCHOR_RATIOS = (0.5, 1.0, 2.0)  # width / height


@dataclass
class AnchorGrid:
    level: int
    stride: int
    scales: tuple[float, ...]
    ratios: tuple[float, ...]
    shape: tuple[int, int]
    boxes: np.ndarray  # (H * W * A, 4); row-major cells, then scale, then ratio

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    @property
    def scale(self) -> float:
        return self.scales[0]


def anchor_shapes(scales, ratios=ANCHOR_RATIOS) -> np.ndarray:
    """(len(scales) * len(ratios), 2) widths and heights with w*h = s^2 and w/h = r."""
    out = []
    for s in scales:
        for r in ratios:
            out.append((s * np.sqrt(r), s / np.sqrt(r)))
    return np.array(out, dtype=np.float64)


def grid_anchors(shape: tuple[int, int], stride: int, scales, ratios=ANCHOR_RATIOS) -> np.ndarray:
    h, w = shape
    wh = anchor_shapes(scales, ratios)
    cy = (np.arange(h) + 0.5) * stride
    cx = (np.arange(w) + 0.5) * stride
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx, cyy], axis=-1).reshape(-1, 1, 2)
    half = wh[None] / 2
    boxes = np.concatenate([centers - half, centers + half], axis=-1)
    return boxes.reshape(-1, 4)


def generate_anchors(level_shapes: dict[int, tuple[int, int]],
                     scales: dict[int, tuple[float, ...]] | None = None,
                     ratios=ANCHOR_RATIOS) -> dict[int, AnchorGrid]:
    """Single-scale anchors per pyramid level; out-of-image anchors are kept.

    ``scales`` overrides the per-level scale set (the single-map baselines put
    all five scales on one level).
    """
    grids = {}
    for k, shape in sorted(level_shapes.items()):
        if scales is None:
            if k not in ANCHOR_SCALES:
                raise ValueError(f"unknown pyramid level {k}")
            level_scales = (ANCHOR_SCALES[k],)
        else:
            level_scales = tuple(scales[k])
        stride = 2 ** k
        grids[k] = AnchorGrid(k, stride, level_scales, tuple(ratios), tuple(shape),
                              grid_anchors(tuple(shape), stride, level_scales, ratios))
    return grids


def box_area(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b)); degenerate boxes have IoU 0 with everything."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a, area_b = box_area(a), box_area(b)
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=valid & (union > 0))
    return out


def iou(a, b) -> float:
    return float(iou_matrix(a, b)[0, 0])


def _centers(b: np.ndarray):
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def encode_deltas(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    ax, ay, aw, ah = _centers(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchors must have positive width and height")
    tx, ty, tw, th = _centers(targets)
    return np.stack([(tx - ax) / aw, (ty - ay) / ah, np.log(tw / aw), np.log(th / ah)], axis=1)


# exp() clamp so wild regressor outputs cannot overflow
MAX_LOG_SCALE = np.log(1000.0 / 16)


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray, clamp: bool = False) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    ax, ay, aw, ah = _centers(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchors must have positive width and height")
    dw, dh = deltas[:, 2], deltas[:, 3]
    if clamp:
        dw = np.minimum(dw, MAX_LOG_SCALE)
        dh = np.minimum(dh, MAX_LOG_SCALE)
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, height)
    return b


def clip_box(box, width: float, height: float) -> np.ndarray:
    return clip_boxes(box, width, height)[0]


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.7,
        max_keep: int | None = None) -> np.ndarray:
    """Greedy NMS. Ties in score keep the lower original index first."""
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes.T
    areas = box_area(boxes)
    keep = []
    limit = len(order) if max_keep is None else max_keep
    while order.size and len(keep) < limit:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        ix1 = np.maximum(x1[i], x1[rest])
        iy1 = np.maximum(y1[i], y1[rest])
        ix2 = np.minimum(x2[i], x2[rest])
        iy2 = np.minimum(y2[i], y2[rest])
        inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
        union = areas[i] + areas[rest] - inter
        ov = np.zeros_like(inter)
        np.divide(inter, union, out=ov, where=(union > 0) & (areas[i] > 0) & (areas[rest] > 0))
        order = rest[ov <= iou_threshold]
    return np.array(keep, dtype=np.int64)
