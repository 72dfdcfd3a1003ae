"""Region proposal network adapted to a feature pyramid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import boxes as B
from . import tensor as T
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


class RpnHead(Module):
    """3x3 conv + ReLU, then sibling 1x1 convs for objectness and box deltas."""

    def __init__(self, rng, in_channels: int, d: int, anchors_per_cell: int = 3):
        self.conv = Conv2d(rng, in_channels, d, 3, padding=1)
        self.cls = Conv2d(rng, d, anchors_per_cell, 1, std=0.01)
        self.reg = Conv2d(rng, d, 4 * anchors_per_cell, 1, std=0.01)
        self.in_channels = in_channels

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"rpn head expects {self.in_channels} channels, got {x.shape}")
        h = T.relu(self.conv(x))
        return self.cls(h), self.reg(h)


class RPN(Module):
    """One head shared by every level, or one head per level when ``share=False``."""

    def __init__(self, in_channels: int, d: int, levels: list[int], anchors_per_cell: int = 3,
                 share: bool = True, seed: int = 0):
        rng = np.random.default_rng([seed, 303])
        self.share = share
        self.levels = list(levels)
        if share:
            self.head = RpnHead(rng, in_channels, d, anchors_per_cell)
        else:
            self.heads = {k: RpnHead(rng, in_channels, d, anchors_per_cell) for k in levels}

    def head_for(self, k: int) -> RpnHead:
        return self.head if self.share else self.heads[k]

    def __call__(self, features: dict[int, Tensor]):
        return rpn_forward(features, self)


def rpn_forward(features: dict[int, Tensor], rpn: RPN) -> dict[int, tuple[Tensor, Tensor]]:
    """Per level: (objectness logits N x A x H x W, deltas N x 4A x H x W)."""
    return {k: rpn.head_for(k)(features[k]) for k in sorted(features)}


def flatten_outputs(outputs: dict[int, tuple[Tensor, Tensor]]) -> tuple[Tensor, Tensor]:
    """Concatenate levels into logits (N, total) and deltas (N, total, 4).

    Ordering matches ``generate_anchors``: level, then row-major cell, then anchor.
    """
    logits, deltas = [], []
    for k in sorted(outputs):
        lg, dl = outputs[k]
        n, a, h, w = lg.shape
        logits.append(T.reshape(T.transpose(lg, (0, 2, 3, 1)), (n, h * w * a)))
        deltas.append(T.reshape(T.transpose(dl, (0, 2, 3, 1)), (n, h * w * a, 4)))
    return T.concat(logits, axis=1), T.concat(deltas, axis=1)


def all_anchors(grids: dict[int, B.AnchorGrid]) -> np.ndarray:
    return np.concatenate([grids[k].boxes for k in sorted(grids)], axis=0)


@dataclass
class AnchorLabels:
    labels: np.ndarray   # int8 per anchor: 1 positive, 0 negative, -1 ignore
    matched: np.ndarray  # index of the best GT per anchor (meaningful for positives)
    max_iou: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


def assign_anchor_labels(anchors: np.ndarray, gt_boxes: np.ndarray, pos_iou: float = 0.7,
                         neg_iou: float = 0.3) -> AnchorLabels:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if anchors.shape[0] == 0:
        raise ValueError("no anchors to label")
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = anchors.shape[0]
    if gt.shape[0] == 0:
        return AnchorLabels(np.zeros(n, np.int8), np.zeros(n, np.int64), np.zeros(n))
    ious = B.iou_matrix(anchors, gt)
    matched = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), matched]
    labels = np.full(n, IGNORE, dtype=np.int8)
    labels[max_iou < neg_iou] = NEGATIVE
    labels[max_iou > pos_iou] = POSITIVE
    # every GT's best anchor(s) are positive, ties included
    gt_best = ious.max(axis=0)
    for g in np.flatnonzero(gt_best > 0):
        hits = np.flatnonzero(ious[:, g] == gt_best[g])
        labels[hits] = POSITIVE
    return AnchorLabels(labels, matched, max_iou)


def sample_anchors(labels: AnchorLabels, batch_size: int, rng: np.random.Generator,
                   positive_fraction: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    pos, neg = labels.positives, labels.negatives
    n_pos = min(len(pos), int(batch_size * positive_fraction))
    n_neg = min(len(neg), batch_size - n_pos)
    pos = np.sort(rng.choice(pos, size=n_pos, replace=False)) if n_pos < len(pos) else pos
    neg = np.sort(rng.choice(neg, size=n_neg, replace=False)) if n_neg < len(neg) else neg
    return pos, neg


def rpn_loss(logits: Tensor, deltas: Tensor, anchors: np.ndarray, labels: list[AnchorLabels],
             gt_boxes: list[np.ndarray], rng: np.random.Generator, batch_size: int = 256,
             positive_fraction: float = 0.5) -> tuple[Tensor, float, float]:
    """Sampled objectness BCE plus smooth-L1 on positive deltas, over the sample count.

    ``logits`` is (N, A) and ``deltas`` (N, A, 4) as produced by ``flatten_outputs``.
    Returns (loss, classification part, regression part).
    """
    n, a = logits.shape
    cls_idx, cls_y, reg_idx, reg_t = [], [], [], []
    for i in range(n):
        pos, neg = sample_anchors(labels[i], batch_size, rng, positive_fraction)
        cls_idx += [i * a + pos, i * a + neg]
        cls_y += [np.ones(len(pos)), np.zeros(len(neg))]
        if len(pos):
            gt = np.asarray(gt_boxes[i], dtype=np.float64).reshape(-1, 4)
            reg_idx.append(i * a + pos)
            reg_t.append(B.encode_deltas(anchors[pos], gt[labels[i].matched[pos]]))
    cls_idx = np.concatenate(cls_idx)
    count = max(len(cls_idx), 1)
    flat_logits = T.take(T.reshape(logits, (n * a,)), cls_idx)
    cls_loss = T.sigmoid_binary_cross_entropy(flat_logits, np.concatenate(cls_y),
                                              reduction="sum")
    loss = T.scale(cls_loss, 1.0 / count)
    reg_value = 0.0
    if reg_idx:
        picked = T.take(T.reshape(deltas, (n * a, 4)), np.concatenate(reg_idx))
        reg_loss = T.scale(T.smooth_l1(picked, np.concatenate(reg_t), reduction="sum"), 1.0 / count)
        reg_value = reg_loss.item()
        loss = T.add(loss, reg_loss)
    return loss, cls_loss.item() / count, reg_value


@dataclass
class ProposalConfig:
    pre_nms_top_n: int = 1000
    nms_threshold: float | None = 0.7
    post_nms_top_n: int | None = 1000
    min_size: float = 1.0


@dataclass
class Proposals:
    boxes: np.ndarray   # (P, 4)
    scores: np.ndarray  # (P,)
    levels: np.ndarray  # (P,) level of the originating anchor

    def __len__(self):
        return len(self.scores)


def generate_proposals(logits: dict[int, np.ndarray], deltas: dict[int, np.ndarray],
                       grids: dict[int, B.AnchorGrid], image_size: tuple[int, int],
                       cfg: ProposalConfig = ProposalConfig()) -> Proposals:
    """Proposals for one image.

    ``logits[k]`` is (A_k,) and ``deltas[k]`` (A_k, 4) in anchor order for level k.
    Per level: top ``pre_nms_top_n`` by objectness, decode, clip, drop boxes with a
    side under ``min_size``. Then pool all levels, run one NMS, keep the best
    ``post_nms_top_n``. ``nms_threshold=None`` disables NMS.
    """
    height, width = image_size
    all_boxes, all_scores, all_levels = [], [], []
    for k in sorted(grids):
        lg = np.asarray(logits[k], dtype=np.float64).reshape(-1)
        dl = np.asarray(deltas[k], dtype=np.float64).reshape(-1, 4)
        order = np.argsort(-lg, kind="stable")
        if cfg.pre_nms_top_n is not None:
            order = order[: cfg.pre_nms_top_n]
        boxes = B.clip_boxes(B.decode_deltas(grids[k].boxes[order], dl[order], clamp=True), width, height)
        keep = ((boxes[:, 2] - boxes[:, 0]) >= cfg.min_size) & ((boxes[:, 3] - boxes[:, 1]) >= cfg.min_size)
        all_boxes.append(boxes[keep])
        all_scores.append(1.0 / (1.0 + np.exp(-lg[order][keep])))
        all_levels.append(np.full(int(keep.sum()), k))
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    levels = np.concatenate(all_levels)
    if cfg.nms_threshold is not None and len(scores):
        keep = B.nms(boxes, scores, cfg.nms_threshold, cfg.post_nms_top_n)
    else:
        keep = np.argsort(-scores, kind="stable")
        if cfg.post_nms_top_n is not None:
            keep = keep[: cfg.post_nms_top_n]
    return Proposals(boxes[keep], scores[keep], levels[keep])


def split_by_level(flat: np.ndarray, grids: dict[int, B.AnchorGrid]) -> dict[int, np.ndarray]:
    out, off = {}, 0
    for k in sorted(grids):
        n = len(grids[k].boxes)
        out[k] = flat[off : off + n]
        off += n
    return out
