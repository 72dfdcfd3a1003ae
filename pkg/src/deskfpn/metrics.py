"""COCO-style average recall / average precision for boxes and masks."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import boxes as B

SIZE_BINS = {"s": (0.0, 32.0 ** 2), "m": (32.0 ** 2, 96.0 ** 2), "l": (96.0 ** 2, np.inf)}


def coco_thresholds() -> np.ndarray:
    return np.round(np.linspace(0.5, 0.95, 10), 2)


@dataclass
class EvalConfig:
    iou_thresholds: np.ndarray = field(default_factory=coco_thresholds)
    proposal_budgets: tuple[int, ...] = (100, 1000)
    size_bins: dict = field(default_factory=lambda: dict(SIZE_BINS))

    def __post_init__(self):
        t = np.asarray(self.iou_thresholds, dtype=np.float64)
        if np.any(np.diff(t) <= 0) or t.min() <= 0 or t.max() >= 1:
            raise ValueError("IoU thresholds must be strictly increasing inside (0, 1)")
        self.iou_thresholds = t


def in_bin(areas: np.ndarray, bin_range: tuple[float, float]) -> np.ndarray:
    lo, hi = bin_range
    return (areas >= lo) & (areas < hi)


def match_greedy(ious: np.ndarray, threshold: float) -> np.ndarray:
    """Score-ordered one-to-one matching.

    ``ious`` is (D, G) with rows in descending score order. Each detection takes
    the unmatched GT with the highest IoU >= threshold (lowest index on ties).
    Returns the matched GT index per detection, -1 for none.
    """
    d, g = ious.shape
    taken = np.zeros(g, dtype=bool)
    out = np.full(d, -1, dtype=np.int64)
    for i in range(d):
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand)) if g else -1
        if g and cand[j] >= threshold:
            taken[j] = True
            out[i] = j
    return out


def recall_counts(ious: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Matched GT count per threshold for one image."""
    return np.array([int((match_greedy(ious, t) >= 0).sum()) for t in thresholds])


def average_recall(proposals: list[np.ndarray], gts: list[np.ndarray], budget: int,
                   cfg: EvalConfig | None = None, ious: list[np.ndarray] | None = None,
                   gt_areas: list[np.ndarray] | None = None) -> dict[str, float]:
    """AR over the IoU thresholds for the top ``budget`` proposals of each image.

    ``proposals[i]`` is a score-sorted (P, 4) array. Pass precomputed ``ious``
    (P x G per image) and ``gt_areas`` to evaluate segments instead of boxes.
    Size-stratified values restrict the GT set to each area bin.
    """
    cfg = cfg or EvalConfig()
    th = cfg.iou_thresholds
    bins = {"": (0.0, np.inf), **{f"_{k}": v for k, v in cfg.size_bins.items()}}
    matched = {name: np.zeros(len(th)) for name in bins}
    total = {name: 0 for name in bins}
    for i, gt in enumerate(gts):
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
        if ious is None:
            m = B.iou_matrix(np.asarray(proposals[i]).reshape(-1, 4)[:budget], gt)
        else:
            m = np.asarray(ious[i], dtype=np.float64).reshape(-1, len(gt))[:budget]
        areas = B.box_area(gt) if gt_areas is None else np.asarray(gt_areas[i], dtype=np.float64)
        for name, rng in bins.items():
            keep = in_bin(areas, rng)
            total[name] += int(keep.sum())
            if keep.any():
                matched[name] += recall_counts(m[:, keep], th)
    return {f"AR{name}": float(np.mean(matched[name] / total[name])) if total[name] else 0.0
            for name in bins}


def interpolated_ap(tp: np.ndarray, n_gt: int, points: int = 101) -> float:
    """101-point interpolated AP from a score-ordered TP/FP sequence."""
    if n_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    rs = np.linspace(0, 1, points)
    idx = np.searchsorted(recall, rs, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


@dataclass
class ImageDetections:
    boxes: np.ndarray
    scores: np.ndarray
    classes: np.ndarray


def _ap_single(dets: list[ImageDetections], gts: list[tuple[np.ndarray, np.ndarray]], cls: int,
               threshold: float, area_range: tuple[float, float]) -> float:
    """AP for one class at one IoU threshold with COCO-style area ignoring.

    GT outside ``area_range`` is ignored: detections matched to it are dropped,
    as are unmatched detections whose own area is outside the range.
    """
    records = []  # (score, image, det index)
    for i, d in enumerate(dets):
        for j in np.flatnonzero(np.asarray(d.classes) == cls):
            records.append((-float(d.scores[j]), i, int(j)))
    records.sort(key=lambda r: r[0])  # stable: ties keep image/detection order
    n_gt = 0
    state = []
    for i, (gb, gc) in enumerate(gts):
        sel = np.flatnonzero(np.asarray(gc) == cls)
        boxes = np.asarray(gb, dtype=np.float64).reshape(-1, 4)[sel]
        ignore = ~in_bin(B.box_area(boxes), area_range)
        # real GT first so they win matching ties against ignored GT
        order = np.argsort(ignore, kind="stable")
        state.append((boxes[order], ignore[order], np.zeros(len(sel), dtype=bool)))
        n_gt += int((~ignore).sum())
    if n_gt == 0:
        return float("nan")
    tp_seq = []
    for _, i, j in records:
        boxes, ignore, taken = state[i]
        box = np.asarray(dets[i].boxes[j], dtype=np.float64)
        best, best_iou = -1, min(threshold, 1 - 1e-10)
        if len(boxes):
            ious = B.iou_matrix(box[None], boxes)[0]
            for g in range(len(boxes)):
                if taken[g]:
                    continue
                if best >= 0 and not ignore[best] and ignore[g]:
                    break
                # lowest index wins IoU ties, as in match_greedy
                if ious[g] < best_iou or (best >= 0 and ious[g] == best_iou):
                    continue
                best, best_iou = g, ious[g]
        if best >= 0:
            taken[best] = True
            if ignore[best]:
                continue
            tp_seq.append(1)
        else:
            if not in_bin(B.box_area(box[None]), area_range)[0]:
                continue
            tp_seq.append(0)
    return interpolated_ap(np.array(tp_seq), n_gt)


def average_precision(dets: list[ImageDetections], gts: list[tuple[np.ndarray, np.ndarray]],
                      cfg: EvalConfig | None = None) -> dict[str, float]:
    """COCO AP (mean over classes and thresholds), AP@0.5, and AP_s/m/l.

    ``gts[i]`` is (boxes, classes). Classes without GT are left out of the mean.
    """
    cfg = cfg or EvalConfig()
    classes = sorted({int(c) for _, gc in gts for c in np.asarray(gc).reshape(-1)})
    ranges = {"AP": (0.0, np.inf), **{f"AP_{k}": v for k, v in cfg.size_bins.items()}}
    out = {}
    for name, rng in ranges.items():
        table = np.array([[_ap_single(dets, gts, c, t, rng) for t in cfg.iou_thresholds]
                          for c in classes]) if classes else np.zeros((0, len(cfg.iou_thresholds)))
        valid = table[~np.isnan(table)]
        out[name] = float(valid.mean()) if valid.size else 0.0
        if name == "AP":
            col = [_ap_single(dets, gts, c, 0.5, rng) for c in classes]
            col = np.array([v for v in col if not np.isnan(v)])
            out["AP50"] = float(col.mean()) if col.size else 0.0
    return {k: out[k] for k in ("AP", "AP50", "AP_s", "AP_m", "AP_l")}


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def mask_iou_matrix(preds: list[np.ndarray], gts: list[np.ndarray]) -> np.ndarray:
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    p = np.stack([np.asarray(m, dtype=bool).reshape(-1) for m in preds]).astype(np.float64)
    g = np.stack([np.asarray(m, dtype=bool).reshape(-1) for m in gts]).astype(np.float64)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def write_report(path: str | Path, metrics: dict[str, float], header: dict[str, str] | None = None) -> None:
    """``name = value`` lines, values with 6 decimals; ``#`` lines carry context."""
    lines = [f"# {k}: {v}" for k, v in (header or {}).items()]
    lines += [f"{k} = {v:.6f}" for k, v in metrics.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path: str | Path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, v = line.split("=", 1)
        out[k.strip()] = float(v)
    return out
