"""End-to-end networks: proposal (RPN), detection (Fast R-CNN on fixed proposals), masks."""
from __future__ import annotations

import dataclasses

import numpy as np

from . import boxes as B
from . import tensor as T
from .backbone import Backbone
from .config import RunConfig
from .detector import (DetectorHead, Detections, RoIBatch, detector_forward,
                       postprocess_detections)
from .fpn import FPN, PyramidVariant
from .masks import MaskHeads, mask_head_forward
from .nn import Module
from .rpn import RPN, ProposalConfig, Proposals, flatten_outputs, generate_proposals, split_by_level
from .tensor import Tensor

SINGLE_MAP = {"c4": 4, "c5": 5}
ALL_SCALES = tuple(B.ANCHOR_SCALES[k] for k in sorted(B.ANCHOR_SCALES))


class FeatureNet(Module):
    """Backbone plus the feature source selected by ``model.variant``.

    c4 / c5 use a single bottom-up map; the other variants build a pyramid.
    Subclasses own ``backbone`` and ``fpn`` directly so parameter names read
    ``backbone.*`` and ``fpn.*``.
    """

    def _init_features(self, cfg: RunConfig, d: int | None = None, with_p6: bool | None = None):
        self.variant = cfg.model.variant
        self.backbone = Backbone(dataclasses.replace(cfg.backbone, seed=cfg.seed))
        self.d = cfg.model.d if d is None else d
        with_p6 = cfg.model.with_p6 if with_p6 is None else with_p6
        if self.variant in SINGLE_MAP:
            self.fpn = None
            self.out_channels = self.backbone.out_channels[SINGLE_MAP[self.variant]]
        else:
            self.fpn = FPN(self.backbone.out_channels, self.d, PyramidVariant(self.variant), with_p6, cfg.seed)
            self.out_channels = self.d

    @property
    def single_map(self) -> bool:
        return self.variant in SINGLE_MAP or self.variant == "finest"

    def features(self, image: Tensor) -> dict[int, Tensor]:
        c = self.backbone(image)
        if self.fpn is None:
            k = SINGLE_MAP[self.variant]
            return {k: c[k]}
        return dict(self.fpn(c).levels)


class ProposalNet(FeatureNet):
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._init_features(cfg)
        levels = self.levels
        per_cell = len(ALL_SCALES) * 3 if self.single_map else 3
        self.rpn = RPN(self.out_channels, cfg.model.d, levels, per_cell,
                       share=cfg.rpn.share_head, seed=cfg.seed)
        self._grids: dict[tuple[int, int], dict[int, B.AnchorGrid]] = {}

    @property
    def levels(self) -> list[int]:
        v = self.cfg.model.variant
        if v in SINGLE_MAP:
            return [SINGLE_MAP[v]]
        if v == "finest":
            return [2]
        return [2, 3, 4, 5, 6] if self.cfg.model.with_p6 else [2, 3, 4, 5]

    def anchor_grids(self, image_size: tuple[int, int]) -> dict[int, B.AnchorGrid]:
        if image_size not in self._grids:
            h, w = image_size
            shapes = {k: (h // 2 ** k, w // 2 ** k) for k in self.levels}
            scales = {k: ALL_SCALES for k in self.levels} if self.single_map else None
            self._grids[image_size] = B.generate_anchors(shapes, scales)
        return self._grids[image_size]

    def __call__(self, image: Tensor) -> tuple[Tensor, Tensor]:
        """Flattened (logits N x A, deltas N x A x 4) in anchor order."""
        return flatten_outputs(self.rpn(self.features(image)))

    def propose(self, image: Tensor, post_nms_top_n: int | None = None) -> list[Proposals]:
        size = tuple(image.shape[2:])
        grids = self.anchor_grids(size)
        cfg = ProposalConfig(self.cfg.rpn.pre_nms_top_n, self.cfg.rpn.nms_threshold,
                             post_nms_top_n or self.cfg.rpn.post_nms_top_n_test)
        with T.no_grad():
            logits, deltas = self(image)
        out = []
        for i in range(image.shape[0]):
            lg = split_by_level(logits.data[i], grids)
            dl = split_by_level(deltas.data[i], grids)
            out.append(generate_proposals(lg, dl, grids, size, cfg))
        return out


class DetectorNet(FeatureNet):
    """Separate backbone + pyramid (no P6) + shared 2-fc head."""

    def __init__(self, cfg: RunConfig, num_classes: int):
        self.cfg = cfg
        self._init_features(cfg, with_p6=False)
        self.head = DetectorHead(self.out_channels, num_classes, cfg.detector.hidden, seed=cfg.seed)

    def rois(self, boxes: np.ndarray, image_index: np.ndarray) -> RoIBatch:
        v = self.cfg.model.variant
        if v in SINGLE_MAP or v == "finest":
            k = SINGLE_MAP.get(v, 2)
            boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
            return RoIBatch(boxes, np.asarray(image_index), np.full(len(boxes), k))
        return RoIBatch.assign(boxes, image_index, self.cfg.detector.k0)

    def __call__(self, image: Tensor, rois: RoIBatch) -> tuple[Tensor, Tensor]:
        return detector_forward(self.features(image), rois, self.head)


class DetectionModel(Module):
    """Frozen proposal network feeding an independently trained detector."""

    def __init__(self, cfg: RunConfig, num_classes: int):
        self.proposal = ProposalNet(cfg)
        self.detector = DetectorNet(cfg, num_classes)
        self.cfg = cfg


def detect(image: Tensor, model: DetectionModel) -> list[Detections]:
    cfg = model.cfg
    size = tuple(image.shape[2:])
    props = model.proposal.propose(image)
    boxes = [p.boxes for p in props]
    idx = np.concatenate([np.full(len(b), i) for i, b in enumerate(boxes)])
    all_boxes = np.concatenate(boxes) if boxes else np.zeros((0, 4))
    out = []
    if len(all_boxes) == 0:
        return [Detections(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))
                for _ in range(image.shape[0])]
    with T.no_grad():
        logits, deltas = model.detector(image, model.detector.rois(all_boxes, idx))
    for i in range(image.shape[0]):
        sel = idx == i
        out.append(postprocess_detections(logits.data[sel].astype(np.float64), deltas.data[sel].astype(np.float64),
                                          all_boxes[sel], size, cfg.detector.score_threshold,
                                          cfg.detector.nms_threshold, cfg.detector.max_detections))
    return out


class MaskNet(FeatureNet):
    """Pyramid P2..P6 of width ``mask.d`` with the 5x5 and 7x7 mask heads."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        mcfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, variant="fpn"))
        self._init_features(mcfg, d=cfg.mask.d, with_p6=True)
        self.heads = MaskHeads(cfg.mask.d, cfg.mask.hidden, cfg.mask.resolution, seed=cfg.seed)

    def __call__(self, image: Tensor):
        return mask_head_forward(self.features(image), self.heads)
