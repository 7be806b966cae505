"""Residual multiscale block and the baseline refinement blocks (RB, RDB)."""
from __future__ import annotations

import warnings
from typing import Sequence

from . import ops
from .layers import Conv2d, ParamStore
from .tensor import Tensor


class RMB:
    """Three dilated 3x3 convs whose outputs are merged by two 1x1 convs.

    Serial mode feeds each dilated conv the ReLU of the previous one and taps
    all three outputs; parallel mode applies all three to the block input.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, dilations: Sequence[int] = (1, 3, 5),
                 parallel: bool = False):
        if len(dilations) != 3:
            raise ValueError(f"RMB needs three dilation rates, got {tuple(dilations)}")
        self.channels = channels
        self.dilations = tuple(int(d) for d in dilations)
        self.parallel = parallel
        self.convs = [Conv2d(store, f"{name}.dconv{j}", channels, channels, 3, dilation=d,
                             init="linear" if parallel or j == 2 else "kaiming")
                      for j, d in enumerate(self.dilations)]
        self.merge1 = Conv2d(store, f"{name}.merge1", 3 * channels, channels, 1, init="kaiming")
        self.merge2 = Conv2d(store, f"{name}.merge2", channels, channels, 1, init="residual")
        self._warned = False

    @property
    def radius(self) -> int:
        return sum(self.dilations)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"RMB expects {self.channels} channels, got {x.shape[1]}")
        h, w = x.shape[2:]
        if min(h, w) <= 2 * self.radius and not self._warned:
            self._warned = True
            warnings.warn(f"RMB on {h}x{w} input is smaller than its {2 * self.radius + 1}px footprint",
                          stacklevel=2)
        taps = []
        y = x
        for conv in self.convs:
            y = conv(x if self.parallel else (y if not taps else ops.relu(y)))
            taps.append(y)
        merged = self.merge2(ops.relu(self.merge1(ops.concat(taps, axis=1))))
        return x + merged


class ResidualBlock:
    """conv3x3 -> ReLU -> conv3x3 plus identity."""

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.conv1 = Conv2d(store, f"{name}.conv1", channels, channels, 3, init="kaiming")
        self.conv2 = Conv2d(store, f"{name}.conv2", channels, channels, 3, init="residual")

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(ops.relu(self.conv1(x)))


class ResidualDenseBlock:
    """Three densely connected 3x3 layers fused by a 1x1 conv, plus identity."""

    def __init__(self, store: ParamStore, name: str, channels: int, growth: int = None, layers: int = 3):
        growth = growth or max(channels // 2, 1)
        self.layers = [Conv2d(store, f"{name}.dense{j}", channels + j * growth, growth, 3, init="kaiming")
                       for j in range(layers)]
        self.fuse = Conv2d(store, f"{name}.fuse", channels + layers * growth, channels, 1, init="residual")

    def __call__(self, x: Tensor) -> Tensor:
        feats = [x]
        for layer in self.layers:
            feats.append(ops.relu(layer(ops.concat(feats, axis=1))))
        return x + self.fuse(ops.concat(feats, axis=1))


REFINE_BLOCKS = {"rmb", "rb", "rdb"}


def make_refiner(store: ParamStore, name: str, kind: str, channels: int, dilations=(1, 3, 5),
                 parallel: bool = False):
    if kind == "rmb":
        return RMB(store, name, channels, dilations, parallel)
    if kind == "rb":
        return ResidualBlock(store, name, channels)
    if kind == "rdb":
        return ResidualDenseBlock(store, name, channels)
    raise ValueError(f"unknown refinement block {kind!r}; choose from {sorted(REFINE_BLOCKS)}")


def rmb_stack(blocks: Sequence, x: Tensor) -> Tensor:
    for block in blocks:
        x = block(x)
    return x
