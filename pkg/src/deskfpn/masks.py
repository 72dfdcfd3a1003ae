"""Fully convolutional segment proposals over a feature pyramid.

Two heads slide over every level: a 5x5 one for full-octave object scales
{32, 64, ..., 512} on P2..P6 and a 7x7 one for the half octaves in between.
Each output cell predicts an objectness score and a 14x14 mask covering a
fixed image window centred on the cell (canonical scale plus 25% padding).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor

FULL, HALF = "5x5", "7x7"
HEAD_KERNELS = {FULL: 5, HALF: 7}
BASE_SCALE = 32.0
GRID_STEPS = 9  # 32 * sqrt(2)^n for n = 0..8, i.e. 32 .. 512
PADDING = 1.25
MASK_LEVELS = (2, 3, 4, 5, 6)


def grid_scale(level: int, head: str) -> float:
    """Canonical object scale handled by ``head`` on ``level``."""
    s = BASE_SCALE * 2.0 ** (level - 2)
    return s * math.sqrt(2) if head == HALF else s


def region_size(level: int, head: str) -> float:
    """Side of the image window a mask output covers: canonical scale * 1.25."""
    return PADDING * grid_scale(level, head)


def scale_band() -> tuple[float, float]:
    return BASE_SCALE * 2 ** -0.25, BASE_SCALE * 2 ** ((GRID_STEPS - 1) / 2 + 0.25)


def mask_scale_to_level(mask_w: float, mask_h: float) -> tuple[int, str] | None:
    """Route an object to (level, head) by max(w, h), snapping to the nearest
    half-octave grid point in log space (exact midpoints snap down).

    Returns None for scales outside the grid's band.
    """
    if mask_w <= 0 or mask_h <= 0:
        raise ValueError("mask extents must be positive")
    s = max(mask_w, mask_h)
    lo, hi = scale_band()
    if s < lo or s > hi:
        return None
    t = 2.0 * math.log2(s / BASE_SCALE)
    n = math.ceil(t - 0.5)
    n = min(max(n, 0), GRID_STEPS - 1)
    return 2 + n // 2, (HALF if n % 2 else FULL)


class MaskHead(Module):
    """k x k conv to a hidden width, ReLU, then 1x1 convs for the mask and the score."""

    def __init__(self, rng, d: int, kernel: int, hidden: int = 512, resolution: int = 14):
        self.conv = Conv2d(rng, d, hidden, kernel, padding=kernel // 2)
        self.mask_out = Conv2d(rng, hidden, resolution * resolution, 1, std=0.01)
        self.score_out = Conv2d(rng, hidden, 1, 1, std=0.01)
        self.d = d
        self.resolution = resolution

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = T.relu(self.conv(x))
        return self.score_out(h), self.mask_out(h)


class MaskHeads(Module):
    def __init__(self, d: int = 128, hidden: int = 512, resolution: int = 14, seed: int = 0):
        rng = np.random.default_rng([seed, 505])
        self.heads = {name: MaskHead(rng, d, k, hidden, resolution) for name, k in HEAD_KERNELS.items()}
        self.d = d
        self.resolution = resolution


def mask_head_forward(levels: dict[int, Tensor], heads: MaskHeads) -> dict[tuple[int, str], tuple[Tensor, Tensor]]:
    """Per (level, head): score logits N x 1 x H x W and mask logits N x R^2 x H x W."""
    out = {}
    for k in sorted(levels):
        x = levels[k]
        if x.shape[1] != heads.d:
            raise ShapeError(f"mask heads expect d={heads.d}, level {k} has {x.shape[1]} channels")
        for name in (FULL, HALF):
            out[(k, name)] = heads.heads[name](x)
    return out


def coverage_grid(mask: np.ndarray, x0: float, y0: float, size: float, resolution: int) -> np.ndarray:
    """Fraction of each of resolution x resolution window cells covered by ``mask``.

    ``mask`` is an H x W binary image whose pixel (y, x) spans [x, x+1) x [y, y+1).
    The window is [x0, x0+size) x [y0, y0+size); parts outside the image count as empty.
    """
    h, w = mask.shape
    edges = np.arange(resolution + 1) * (size / resolution)

    def overlap(start, n):
        lo = start + edges[:-1]
        hi = start + edges[1:]
        px = np.arange(n)
        return np.clip(np.minimum(hi[:, None], px[None, :] + 1) - np.maximum(lo[:, None], px[None, :]), 0, None)

    wy = overlap(y0, h)
    wx = overlap(x0, w)
    cell = (size / resolution) ** 2
    return (wy @ mask.astype(np.float64) @ wx.T) / cell


def rasterize_target(mask: np.ndarray, cx: float, cy: float, size: float, resolution: int) -> np.ndarray:
    """A target cell is 1 iff the mask covers more than half of its image footprint."""
    return (coverage_grid(mask, cx - size / 2, cy - size / 2, size, resolution) > 0.5).astype(np.float32)


@dataclass
class MaskTargets:
    """Dense targets per (level, head): positive flags (H, W) and masks (H, W, R*R)."""

    positive: dict[tuple[int, str], np.ndarray]
    masks: dict[tuple[int, str], np.ndarray]

    def num_positive(self) -> int:
        return int(sum(p.sum() for p in self.positive.values()))


def mask_level_shapes(image_size: tuple[int, int], levels=MASK_LEVELS) -> dict[int, tuple[int, int]]:
    h, w = image_size
    return {k: (h // 2 ** k, w // 2 ** k) for k in levels}


def build_mask_targets(gt_boxes: np.ndarray, gt_masks: list[np.ndarray],
                       level_shapes: dict[int, tuple[int, int]], resolution: int = 14) -> MaskTargets:
    """Positive cells lie within 2^k pixels (per axis) of an object centre routed to
    that (level, head); their targets are the object's mask rasterized over the
    head's window centred on the cell. A cell claimed by several objects takes
    the one whose centre is closest.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_masks) != len(gt_boxes):
        raise ValueError("one mask per GT box required")
    positive, masks, best = {}, {}, {}
    for k, (h, w) in level_shapes.items():
        for name in (FULL, HALF):
            positive[(k, name)] = np.zeros((h, w), dtype=bool)
            masks[(k, name)] = np.zeros((h, w, resolution * resolution), dtype=np.float32)
            best[(k, name)] = np.full((h, w), np.inf)
    for box, m in zip(gt_boxes, gt_masks):
        ys, xs = np.nonzero(m)
        if len(ys) == 0:
            raise ValueError("empty GT mask")
        if xs.min() < box[0] or xs.max() + 1 > box[2] or ys.min() < box[1] or ys.max() + 1 > box[3]:
            raise ValueError(f"GT mask extends outside its box {box}")
        route = mask_scale_to_level(box[2] - box[0], box[3] - box[1])
        if route is None or route[0] not in level_shapes:
            continue
        k, name = route
        stride = 2 ** k
        h, w = level_shapes[k]
        cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
        size = region_size(k, name)
        # cells whose centre (j + 0.5) * stride lies within stride of the object centre
        j_lo = max(math.ceil((cx - stride) / stride - 0.5), 0)
        j_hi = min(math.floor((cx + stride) / stride - 0.5), w - 1)
        i_lo = max(math.ceil((cy - stride) / stride - 0.5), 0)
        i_hi = min(math.floor((cy + stride) / stride - 0.5), h - 1)
        for i in range(i_lo, i_hi + 1):
            for j in range(j_lo, j_hi + 1):
                ccx, ccy = (j + 0.5) * stride, (i + 0.5) * stride
                dist = math.hypot(ccx - cx, ccy - cy)
                if dist >= best[(k, name)][i, j]:
                    continue
                best[(k, name)][i, j] = dist
                positive[(k, name)][i, j] = True
                masks[(k, name)][i, j] = rasterize_target(m, ccx, ccy, size, resolution).reshape(-1)
    return MaskTargets(positive, masks)


def _flatten_outputs(outputs, keys):
    """Concatenate scores to (N, cells) and masks to (N, cells, R^2) in ``keys`` order."""
    scores, masks = [], []
    for key in keys:
        s, m = outputs[key]
        n, r2, h, w = m.shape
        scores.append(T.reshape(s, (n, h * w)))
        masks.append(T.reshape(T.transpose(m, (0, 2, 3, 1)), (n, h * w, r2)))
    return T.concat(scores, axis=1), T.concat(masks, axis=1)


def mask_loss(outputs, targets: list[MaskTargets], rng: np.random.Generator, per_image: int = 128,
              positive_fraction: float = 0.25, mask_weight: float = 10.0) -> tuple[Tensor, float, float]:
    """mask_weight * mean per-pixel BCE over sampled positives' masks + mean score BCE.

    Each image contributes up to ``per_image`` cells, positives capped at
    ``positive_fraction`` (1:3). Negatives train only the score branch.
    """
    keys = sorted(outputs)
    scores, masks = _flatten_outputs(outputs, keys)
    n, cells = scores.shape
    r2 = masks.shape[2]
    s_idx, s_y, m_idx, m_t = [], [], [], []
    for i, tg in enumerate(targets):
        pos_flag = np.concatenate([tg.positive[key].reshape(-1) for key in keys])
        tmask = np.concatenate([tg.masks[key].reshape(-1, r2) for key in keys])
        pos, neg = np.flatnonzero(pos_flag), np.flatnonzero(~pos_flag)
        n_pos = min(len(pos), int(per_image * positive_fraction))
        n_neg = min(len(neg), per_image - n_pos)
        if n_pos < len(pos):
            pos = np.sort(rng.choice(pos, n_pos, replace=False))
        if n_neg < len(neg):
            neg = np.sort(rng.choice(neg, n_neg, replace=False))
        s_idx += [i * cells + pos, i * cells + neg]
        s_y += [np.ones(len(pos)), np.zeros(len(neg))]
        if len(pos):
            m_idx.append(i * cells + pos)
            m_t.append(tmask[pos])
    s_idx = np.concatenate(s_idx)
    score_loss = T.sigmoid_binary_cross_entropy(T.take(T.reshape(scores, (n * cells,)), s_idx),
                                                np.concatenate(s_y), reduction="mean")
    if not m_idx:
        return score_loss, score_loss.item(), 0.0
    picked = T.take(T.reshape(masks, (n * cells, r2)), np.concatenate(m_idx))
    m_loss = T.sigmoid_binary_cross_entropy(picked, np.concatenate(m_t), reduction="mean")
    return T.add(score_loss, T.scale(m_loss, mask_weight)), score_loss.item(), m_loss.item()


@dataclass
class MaskProposal:
    score: float
    box: np.ndarray   # image window [x1, y1, x2, y2]
    mask: np.ndarray  # (R, R) binary
    level: int
    head: str
    cell: tuple[int, int]

    def paste(self, image_size: tuple[int, int]) -> np.ndarray:
        """Binary image-sized mask: a pixel is on when its centre falls in an 'on' cell."""
        h, w = image_size
        res = self.mask.shape[0]
        x1, y1, x2, y2 = self.box
        size = x2 - x1
        ys = np.arange(h) + 0.5
        xs = np.arange(w) + 0.5
        iy = np.floor((ys - y1) / size * res).astype(np.int64)
        ix = np.floor((xs - x1) / size * res).astype(np.int64)
        vy = (iy >= 0) & (iy < res)
        vx = (ix >= 0) & (ix < res)
        out = np.zeros((h, w), dtype=bool)
        sub = self.mask[np.clip(iy, 0, res - 1)][:, np.clip(ix, 0, res - 1)].astype(bool)
        out[:] = sub & vy[:, None] & vx[None, :]
        return out


def generate_mask_proposals(outputs, top_n: int = 1000, image_index: int = 0) -> list[MaskProposal]:
    """Global top-n cells by score over all levels and heads. No NMS."""
    cand_scores, cand_keys = [], []
    for key in sorted(outputs):
        s, _ = outputs[key]
        logits = s.data[image_index, 0].reshape(-1).astype(np.float64)
        cand_scores.append(1.0 / (1.0 + np.exp(-logits)))
        cand_keys.append(np.full(len(logits), len(cand_keys)))
    keys = sorted(outputs)
    scores = np.concatenate(cand_scores)
    which = np.concatenate(cand_keys)
    local = np.concatenate([np.arange(len(c)) for c in cand_scores])
    order = np.argsort(-scores, kind="stable")[:top_n]
    props = []
    for idx in order:
        k, name = keys[which[idx]]
        _, m = outputs[(k, name)]
        w = m.shape[3]
        res = int(round(math.sqrt(m.shape[1])))
        i, j = divmod(int(local[idx]), w)
        stride = 2 ** k
        cx, cy = (j + 0.5) * stride, (i + 0.5) * stride
        size = region_size(k, name)
        logits = m.data[image_index, :, i, j].reshape(res, res)
        props.append(MaskProposal(float(scores[idx]),
                                  np.array([cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2]),
                                  (logits > 0).astype(np.uint8), k, name, (i, j)))
    return props
