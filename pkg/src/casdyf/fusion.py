"""Progressive fusion: local fusion of adjacent branches, then global
parallel-attention fusion of all branches."""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

from . import ops
from .layers import Conv2d, ParamStore
from .tensor import Tensor


def neighbor_triple(i: int, n: int) -> Tuple[int, int, int]:
    """1-based indices of the three branches fused into branch ``i``.

    For n < 3 the window is clamped into 1..n, repeating branches.
    """
    if not 1 <= i <= n:
        raise IndexError(f"branch index {i} outside 1..{n}")
    if i == 1:
        start = 1
    elif i == n:
        start = n - 2
    else:
        start = i - 1
    return tuple(min(max(j, 1), n) for j in (start, start + 1, start + 2))


class LocalFusion:
    """Input-conditioned gates over a branch triple, fixed 1x1 merge, residual
    to the current branch."""

    def __init__(self, store: ParamStore, name: str, channels: int, reduction: int = 4):
        self.channels = channels
        c3 = 3 * channels
        hidden = max(c3 // reduction, 4)
        self.gate1 = Conv2d(store, f"{name}.gate1", c3, hidden, 1, init="kaiming")
        self.gate2 = Conv2d(store, f"{name}.gate2", hidden, c3, 1)
        self.merge = Conv2d(store, f"{name}.merge", c3, channels, 1)

    def gates(self, stacked: Tensor) -> Tensor:
        return ops.sigmoid(self.gate2(ops.relu(self.gate1(ops.global_avg_pool(stacked)))))

    def __call__(self, branches: Sequence[Tensor], i: int, force_gates: Optional[Tensor] = None) -> Tensor:
        triple = neighbor_triple(i, len(branches))
        stacked = ops.concat([branches[j - 1] for j in triple], axis=1)
        g = self.gates(stacked) if force_gates is None else force_gates
        return branches[i - 1] + self.merge(ops.mul(stacked, g))


def local_fuse(blocks: Sequence[LocalFusion], branches: Sequence[Tensor]) -> List[Tensor]:
    return [blk(branches, i + 1) for i, blk in enumerate(blocks)]


class GlobalFusion:
    """Entry 1x1 conv, three parallel sigmoid-gated attention paths (channel,
    spatial 7x7, pixel) summed, exit 1x1 conv, residual of the concatenated
    branches."""

    def __init__(self, store: ParamStore, name: str, channels: int, reduction: int = 8):
        self.channels = channels
        hidden = max(channels // reduction, 4)
        self.entry = Conv2d(store, f"{name}.entry", channels, channels, 1)
        self.ca1 = Conv2d(store, f"{name}.ca1", channels, hidden, 1, init="kaiming")
        self.ca2 = Conv2d(store, f"{name}.ca2", hidden, channels, 1)
        self.sa = Conv2d(store, f"{name}.sa", 2, 1, 7)
        self.pa = Conv2d(store, f"{name}.pa", channels, channels, 1)
        # zero exit: the fusion starts as its residual path
        self.exit = Conv2d(store, f"{name}.exit", channels, channels, 1, init="zeros")

    def channel_gate(self, e: Tensor) -> Tensor:
        return ops.sigmoid(self.ca2(ops.relu(self.ca1(ops.global_avg_pool(e)))))

    def spatial_gate(self, e: Tensor) -> Tensor:
        pooled = ops.concat([ops.channel_mean(e), ops.channel_max(e)], axis=1)
        return ops.sigmoid(self.sa(pooled))

    def pixel_gate(self, e: Tensor) -> Tensor:
        return ops.sigmoid(self.pa(e))

    def attend(self, e: Tensor, force_gates: Optional[Sequence] = None) -> Tensor:
        gates = force_gates or (self.channel_gate(e), self.spatial_gate(e), self.pixel_gate(e))
        out = None
        for g in gates:
            term = ops.mul(e, g)
            out = term if out is None else out + term
        return out

    def __call__(self, branches: Sequence[Tensor], force_gates: Optional[Sequence] = None) -> Tensor:
        ref = branches[0].shape
        for j, b in enumerate(branches):
            if b.shape[0] != ref[0] or b.shape[2:] != ref[2:]:
                raise ValueError(f"global fusion: branch {j + 1} shape {b.shape} inconsistent with {ref}")
        x = ops.concat(list(branches), axis=1) if len(branches) > 1 else branches[0]
        if x.shape[1] != self.channels:
            raise ValueError(f"global fusion expects {self.channels} total channels, got {x.shape[1]}")
        return x + self.exit(self.attend(self.entry(x), force_gates))
