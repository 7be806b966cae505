"""Three-scale U-shaped dehazing network built from cascaded dynamic-filter blocks."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from . import ops
from .dfs import STRATEGIES, Cascade, CascadeConfig
from .fusion import GlobalFusion, LocalFusion
from .layers import Conv2d, Downsample, ParamStore, Upsample, init_params
from .rmb import REFINE_BLOCKS
from .tensor import Tensor


@dataclass
class ModelConfig:
    channels: int = 32
    branches: int = 4
    depths: Tuple[int, int, int, int, int] = (1, 1, 2, 1, 1)  # enc1, enc2, bottleneck, dec2, dec1
    rmb_count: int = 2
    dilations: Tuple[int, int, int] = (1, 3, 5)
    kernel_size: int = 3
    strategy: str = "dynamic"
    global_residual: bool = True
    refine_block: str = "rmb"
    rmb_parallel: bool = False
    rmb_last_branch: bool = False
    local_fusion: bool = True
    global_fusion: bool = True
    in_channels: int = 3

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.dilations = tuple(int(d) for d in self.dilations)
        if len(self.depths) != 5 or any(d < 0 for d in self.depths):
            raise ValueError(f"depths must be five non-negative ints, got {self.depths}")
        for width in self.stage_widths:
            if width % self.branches:
                raise ValueError(f"stage width {width} not divisible by branch count {self.branches}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown branch strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.refine_block not in REFINE_BLOCKS:
            raise ValueError(f"unknown refinement block {self.refine_block!r}")

    @property
    def stage_widths(self) -> Tuple[int, int, int]:
        return (self.channels, 2 * self.channels, 4 * self.channels)

    def cascade_config(self, width: int) -> CascadeConfig:
        return CascadeConfig(width, self.branches, self.kernel_size, self.strategy, self.rmb_count,
                             self.dilations, self.refine_block, self.rmb_parallel, self.rmb_last_branch)

    def to_dict(self) -> Dict:
        d = dataclasses.asdict(self)
        d["depths"] = list(self.depths)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class CasDyFBlock:
    """Segmentation -> per-branch refinement -> local fusion -> global fusion,
    wrapped in an identity skip so the block is the identity at zero weights.

    Channel splitting already hands the input to the residual chain of the
    refinement and fusion stages, so that strategy gets no outer skip.
    """

    def __init__(self, store: ParamStore, name: str, width: int, cfg: ModelConfig):
        self.width = width
        ccfg = cfg.cascade_config(width)
        self.cascade = Cascade(store, f"{name}.cascade", ccfg)
        cb = ccfg.branch_channels
        self.local = ([LocalFusion(store, f"{name}.lfb{i}", cb) for i in range(1, cfg.branches + 1)]
                      if cfg.local_fusion else [])
        self.glob = GlobalFusion(store, f"{name}.gf", width) if cfg.global_fusion else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.width:
            raise ValueError(f"block expects {self.width} channels, got {x.shape[1]}")
        branches = self.cascade(x)
        if self.local:
            branches = [lfb(branches, i + 1) for i, lfb in enumerate(self.local)]
        if self.glob is not None:
            fused = self.glob(branches)
        else:
            fused = ops.concat(branches, axis=1) if len(branches) > 1 else branches[0]
        return fused if self.cascade.partitions_input else x + fused


class CasDyFNet:
    """Encoder-decoder with side inputs at 1/2 and 1/4 scale and three
    reconstruction heads.

    ``forward`` returns predictions at full, half and quarter resolution.
    """

    def __init__(self, cfg: Optional[ModelConfig] = None, seed: int = 0, dtype=None):
        self.cfg = cfg = cfg or ModelConfig()
        self.store = store = ParamStore(dtype)
        c1, c2, c3 = cfg.stage_widths
        e1, e2, b, d2, d1 = cfg.depths
        cin = cfg.in_channels

        def blocks(name, width, count):
            return [CasDyFBlock(store, f"{name}.{j}", width, cfg) for j in range(count)]

        self.stem = Conv2d(store, "stem", cin, c1, 3)
        self.enc1 = blocks("enc1", c1, e1)
        self.down1 = Downsample(store, "down1", c1, c2)
        self.inject2 = Conv2d(store, "inject2", cin, c2, 3)
        self.enc2 = blocks("enc2", c2, e2)
        self.down2 = Downsample(store, "down2", c2, c3)
        self.inject3 = Conv2d(store, "inject3", cin, c3, 3)
        self.bottleneck = blocks("bottleneck", c3, b)
        self.head3 = Conv2d(store, "head3", c3, cin, 3, init="head")
        self.up2 = Upsample(store, "up2", c3, c2)
        self.dec2 = blocks("dec2", c2, d2)
        self.head2 = Conv2d(store, "head2", c2, cin, 3, init="head")
        self.up1 = Upsample(store, "up1", c2, c1)
        self.dec1 = blocks("dec1", c1, d1)
        self.head1 = Conv2d(store, "head1", c1, cin, 3, init="head")
        init_params(store, seed)

    # -------------------------------------------------------------- mode
    @property
    def training(self) -> bool:
        return self.store.training

    def train(self, mode: bool = True) -> "CasDyFNet":
        self.store.training = mode
        return self

    def eval(self) -> "CasDyFNet":
        return self.train(False)

    def parameters(self):
        return self.store.parameters()

    def num_parameters(self) -> int:
        return self.store.num_parameters()

    # ----------------------------------------------------------- forward
    @staticmethod
    def _stage(blocks: List[CasDyFBlock], f: Tensor, side: Optional[Tensor]) -> Tensor:
        if not blocks and side is not None:
            return f + side
        for j, blk in enumerate(blocks):
            f = blk(f)
            if j == 0 and side is not None:
                f = f + side
        return f

    def forward(self, hazy: Tensor, inject: Tuple[bool, bool] = (True, True)) -> Tuple[Tensor, Tensor, Tensor]:
        if hazy.ndim != 4 or hazy.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (N, {self.cfg.in_channels}, H, W) input, got {hazy.shape}")
        h, w = hazy.shape[2:]
        if h % 4 or w % 4:
            raise ValueError(f"input H and W must be divisible by 4, got {h}x{w}; pad the image first")
        half = ops.resize(hazy, 0.5)
        quarter = ops.resize(half, 0.5)

        f = self._stage(self.enc1, self.stem(hazy), None)
        skip1 = f
        f = self._stage(self.enc2, self.down1(f), self.inject2(half) if inject[0] else None)
        skip2 = f
        f = self._stage(self.bottleneck, self.down2(f), self.inject3(quarter) if inject[1] else None)
        out3 = self.head3(f)
        f = self._stage(self.dec2, self.up2(f) + skip2, None)
        out2 = self.head2(f)
        f = self._stage(self.dec1, self.up1(f) + skip1, None)
        out1 = self.head1(f)
        if self.cfg.global_residual:
            out1, out2, out3 = out1 + hazy, out2 + half, out3 + quarter
        return out1, out2, out3

    __call__ = forward
