"""Dynamic feature segmentation: cascaded dynamic filters that split a feature
map into ``n`` branches.

Level ``i`` receives ``C_i = C - (i - 1) * C / n`` channels, filters them with
a per-sample kernel, emits a ``C / n`` channel branch from the filtered map and
passes a reduced complement (input minus filtered) to the next level.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from . import ops
from .layers import BatchNorm2d, Conv2d, ParamStore
from .rmb import make_refiner, rmb_stack
from .tensor import Tensor

STRATEGIES = ("dynamic", "fixed-conv", "resolution", "split")


@dataclass(frozen=True)
class CascadeConfig:
    channels: int
    branches: int = 4
    kernel_size: int = 3
    strategy: str = "dynamic"
    rmb_count: int = 2
    dilations: Tuple[int, int, int] = (1, 3, 5)
    refine_block: str = "rmb"
    rmb_parallel: bool = False
    rmb_last_branch: bool = False

    def __post_init__(self):
        if self.branches < 1:
            raise ValueError(f"branch count must be >= 1, got {self.branches}")
        if self.channels % self.branches:
            raise ValueError(f"channels {self.channels} not divisible by branch count {self.branches}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown branch strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.rmb_count < 0:
            raise ValueError("rmb_count must be >= 0")

    @property
    def branch_channels(self) -> int:
        return self.channels // self.branches

    def level_channels(self, i: int) -> int:
        """Input channel count of DFS level ``i`` (1-based)."""
        return (self.branches - i + 1) * self.channels // self.branches


class DynamicFilterUnit:
    """GAP -> 1x1 conv (C -> k*k*C) -> BN -> softmax over each channel's k*k taps."""

    def __init__(self, store: ParamStore, name: str, channels: int, k: int = 3):
        self.channels, self.k = channels, k
        self.generator = Conv2d(store, f"{name}.generator", channels, k * k * channels, 1)
        self.norm = BatchNorm2d(store, f"{name}.norm", k * k * channels)

    def logits(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"dynamic filter expects {self.channels} channels, got {x.shape[1]}")
        return self.norm(self.generator(ops.global_avg_pool(x)))

    def kernels_from_logits(self, logits: Tensor) -> Tensor:
        n = logits.shape[0]
        k = self.k
        probs = ops.softmax(logits, axis=1, group=k * k)
        return ops.reshape(probs, (n, self.channels, k, k))

    def generate_kernel(self, x: Tensor) -> Tensor:
        return self.kernels_from_logits(self.logits(x))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dynamic_filter(x, self.generate_kernel(x))


class FixedFilterUnit:
    """Ordinary learned 3x3 conv in place of the generated kernel."""

    def __init__(self, store: ParamStore, name: str, channels: int, k: int = 3):
        self.conv = Conv2d(store, f"{name}.filter", channels, channels, k)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


class DFSLevel:
    """One split step: filtered branch plus reduced complement."""

    def __init__(self, store: ParamStore, name: str, cfg: CascadeConfig, level: int):
        if not 1 <= level <= cfg.branches - 1:
            raise ValueError(f"DFS level must be in 1..{cfg.branches - 1}, got {level}")
        cin = cfg.level_channels(level)
        self.level, self.cin = level, cin
        if cfg.strategy == "fixed-conv":
            self.filter = FixedFilterUnit(store, f"{name}.dyn", cin, cfg.kernel_size)
        else:
            self.filter = DynamicFilterUnit(store, f"{name}.dyn", cin, cfg.kernel_size)
        self.norm = BatchNorm2d(store, f"{name}.norm", cin)
        self.w_out = Conv2d(store, f"{name}.w_out", cin, cfg.branch_channels, 1)
        self.w_next = Conv2d(store, f"{name}.w_next", cin, cin - cfg.branch_channels, 1)

    def split_step(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        y = self.filter(x)
        branch = self.w_out(ops.relu(self.norm(y)))
        rest = self.w_next(x - y)
        return branch, rest

    __call__ = split_step


class Cascade:
    """Creates ``n`` branches of ``C / n`` channels and refines branches
    1..n-1 (optionally n) with their refinement stacks."""

    def __init__(self, store: ParamStore, name: str, cfg: CascadeConfig):
        self.cfg = cfg
        n, cb = cfg.branches, cfg.branch_channels
        self.levels: List[DFSLevel] = []
        self.projections: List[Conv2d] = []
        if cfg.strategy in ("dynamic", "fixed-conv"):
            self.levels = [DFSLevel(store, f"{name}.dfs{i}", cfg, i) for i in range(1, n)]
        elif cfg.strategy == "resolution":
            self.projections = [Conv2d(store, f"{name}.proj{i}", cfg.channels, cb, 1) for i in range(1, n + 1)]
        refined = n if cfg.rmb_last_branch else n - 1
        self.refiners = [
            [make_refiner(store, f"{name}.branch{i}.refine{j}", cfg.refine_block, cb, cfg.dilations,
                          cfg.rmb_parallel) for j in range(cfg.rmb_count)]
            for i in range(1, refined + 1)
        ]

    @property
    def partitions_input(self) -> bool:
        """True when the raw branches are the input's own channel groups."""
        return self.cfg.strategy == "split"

    def segment(self, x: Tensor) -> List[Tensor]:
        """Raw branches before refinement."""
        cfg = self.cfg
        if x.shape[1] != cfg.channels:
            raise ValueError(f"cascade expects {cfg.channels} channels, got {x.shape[1]}")
        n, cb = cfg.branches, cfg.branch_channels
        if cfg.strategy == "split":
            return [ops.channel_slice(x, i * cb, (i + 1) * cb) for i in range(n)] if n > 1 else [x]
        if cfg.strategy == "resolution":
            return self._resolution_branches(x)
        branches = []
        for level in self.levels:
            f, x = level.split_step(x)
            branches.append(f)
        branches.append(x)
        return branches

    def _resolution_branches(self, x: Tensor) -> List[Tensor]:
        h, w = x.shape[2:]
        depth = self.cfg.branches - 1
        if h % (1 << depth) or w % (1 << depth):
            raise ValueError(f"resolution branches need H, W divisible by {1 << depth}, got {h}x{w}")
        out, cur = [], x
        for i, proj in enumerate(self.projections):
            if i:
                cur = ops.resize(cur, 0.5)
            f = proj(cur)
            for _ in range(i):
                f = ops.resize(f, 2)
            out.append(f)
        return out

    def __call__(self, x: Tensor) -> List[Tensor]:
        branches = self.segment(x)
        return [rmb_stack(self.refiners[i], f) if i < len(self.refiners) else f
                for i, f in enumerate(branches)]
