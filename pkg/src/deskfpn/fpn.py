"""Feature pyramid construction from bottom-up features, plus ablation variants."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BottomUpFeatures
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor


class PyramidVariant(str, enum.Enum):
    FULL_FPN = "fpn"
    BOTTOM_UP_ONLY = "bottomup"
    TOP_DOWN_NO_LATERAL = "nolateral"
    FINEST_ONLY = "finest"


@dataclass
class FeaturePyramid:
    levels: dict[int, Tensor]
    d: int
    has_p6: bool = False
    n_upsamples: int = 0
    strides: dict[int, int] = field(init=False)

    def __post_init__(self):
        self.strides = {k: 2 ** k for k in self.levels}

    def __getitem__(self, k: int) -> Tensor:
        return self.levels[k]

    def shapes(self) -> dict[int, tuple[int, int]]:
        return {k: t.shape[2:] for k, t in self.levels.items()}


class FPN(Module):
    """Lateral 1x1 convs, a top-down nearest-upsampling chain, and 3x3 output convs.

    There are no non-linearities anywhere in these layers.
    """

    def __init__(self, in_channels: dict[int, int], d: int = 256,
                 variant: PyramidVariant | str = PyramidVariant.FULL_FPN, with_p6: bool = False,
                 seed: int = 0):
        if d <= 0:
            raise ValueError("d must be positive")
        self.variant = PyramidVariant(variant)
        self.d = d
        self.with_p6 = with_p6
        rng = np.random.default_rng([seed, 202])
        if self.variant is PyramidVariant.TOP_DOWN_NO_LATERAL:
            lateral_levels = [5]
        else:
            lateral_levels = [5, 4, 3, 2]
        output_levels = [2] if self.variant is PyramidVariant.FINEST_ONLY else [5, 4, 3, 2]
        self.lateral = {k: Conv2d(rng, in_channels[k], d, 1) for k in lateral_levels}
        self.output = {k: Conv2d(rng, d, d, 3, padding=1) for k in output_levels}

    @property
    def levels(self) -> list[int]:
        if self.variant is PyramidVariant.FINEST_ONLY:
            return [2]
        return [2, 3, 4, 5, 6] if self.with_p6 else [2, 3, 4, 5]

    def __call__(self, c: BottomUpFeatures) -> FeaturePyramid:
        return build_pyramid(c, self)


def build_pyramid(c: BottomUpFeatures, net: FPN) -> FeaturePyramid:
    variant = net.variant
    merged: dict[int, Tensor] = {}
    n_up = 0
    if variant is PyramidVariant.BOTTOM_UP_ONLY:
        for k in (5, 4, 3, 2):
            merged[k] = net.lateral[k](c[k])
    else:
        top = net.lateral[5](c[5])
        merged[5] = top
        for k in (4, 3, 2):
            up = T.nearest_upsample2x(top)
            n_up += 1
            if variant is PyramidVariant.TOP_DOWN_NO_LATERAL:
                top = up
            else:
                lat = net.lateral[k](c[k])
                if lat.shape != up.shape:
                    raise ShapeError(f"level {k}: lateral map {lat.shape} vs top-down map {up.shape}")
                top = T.add(up, lat)
            merged[k] = top
    levels = {k: net.output[k](merged[k]) for k in sorted(net.output)}
    has_p6 = False
    if net.with_p6 and variant is not PyramidVariant.FINEST_ONLY:
        levels[6] = T.max_subsample2x(levels[5])
        has_p6 = True
    return FeaturePyramid(levels=levels, d=net.d, has_p6=has_p6, n_upsamples=n_up)


def count_convs(net: FPN, kernel: int) -> int:
    return sum(1 for name, p in net.named_parameters()
               if name.endswith("weight") and p.shape[2] == kernel)
