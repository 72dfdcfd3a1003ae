"""A small residual network producing C2..C5 at strides 4, 8, 16, 32.

No batch normalization: with one or two images per step its statistics are
too noisy to help.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor

STRIDES = {2: 4, 3: 8, 4: 16, 5: 32}


@dataclass
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    seed: int = 0

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("backbone needs exactly four stages (conv2..conv5)")
        if self.stem_channels < 1 or min(self.stage_channels) < 1:
            raise ValueError("channel counts must be positive")
        if min(self.blocks_per_stage) < 1:
            raise ValueError("each stage needs at least one block")


@dataclass
class BottomUpFeatures:
    c2: Tensor
    c3: Tensor
    c4: Tensor
    c5: Tensor

    def __getitem__(self, k: int) -> Tensor:
        return getattr(self, f"c{k}")

    def items(self):
        return [(k, self[k]) for k in (2, 3, 4, 5)]


class ResidualBlock(Module):
    """relu(x + conv(relu(conv(x)))) with a strided 1x1 projection when shapes change."""

    def __init__(self, rng, in_ch: int, out_ch: int, stride: int):
        self.conv1 = Conv2d(rng, in_ch, out_ch, 3, stride=stride)
        # damped second conv keeps the residual stack stable without normalization
        self.conv2 = Conv2d(rng, out_ch, out_ch, 3, std=np.sqrt(2.0 / (9 * out_ch)) * 0.5)
        self.proj = Conv2d(rng, in_ch, out_ch, 1, stride=stride) if (stride != 1 or in_ch != out_ch) else None

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv2(T.relu(self.conv1(x)))
        skip = x if self.proj is None else self.proj(x)
        return T.relu(T.add(y, skip))


class Backbone(Module):
    def __init__(self, config: BackboneConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 101])
        self.stem = Conv2d(rng, 3, config.stem_channels, 3, stride=2)
        self.stages = []
        in_ch = config.stem_channels
        for s, (ch, nblocks) in enumerate(zip(config.stage_channels, config.blocks_per_stage)):
            blocks = []
            for b in range(nblocks):
                stride = 2 if (b == 0 and s > 0) else 1
                blocks.append(ResidualBlock(rng, in_ch, ch, stride))
                in_ch = ch
            self.stages.append(blocks)

    @property
    def out_channels(self) -> dict[int, int]:
        return {k: ch for k, ch in zip((2, 3, 4, 5), self.config.stage_channels)}

    def __call__(self, image: Tensor) -> BottomUpFeatures:
        return backbone_forward(image, self)


def backbone_forward(image: Tensor, net: Backbone) -> BottomUpFeatures:
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"backbone expects N x 3 x H x W, got {image.shape}")
    h, w = image.shape[2:]
    if h % 32 or w % 32:
        raise ShapeError(f"image extents must be multiples of 32, got {h}x{w}")
    x = T.max_subsample2x(T.relu(net.stem(image)))
    outs = []
    for blocks in net.stages:
        for block in blocks:
            x = block(x)
        outs.append(x)
    return BottomUpFeatures(*outs)
