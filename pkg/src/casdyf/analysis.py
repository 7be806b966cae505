"""Frequency spectra of dilated kernels, effective receptive fields and
closed-form parameter / MAC accounting."""
from __future__ import annotations

from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .data import ImageBuffer, write_pgm
from .fft import fft2
from .network import CasDyFNet, ModelConfig
from .tensor import Tensor

AVG3 = np.full((3, 3), 1.0 / 9.0)
LAPLACIAN = np.array([[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]])
BASE_KERNELS = {"avg3": AVG3, "laplacian": LAPLACIAN}

# reference row for the full-size model at 256x256, printed for calibration only
PUBLISHED_REFERENCE = {"params_m": 6.23, "flops_g": 40.55}


# ------------------------------------------------------------------ spectra
@dataclass
class SpectrumReport:
    size: int
    spectrum: np.ndarray  # complex (N, N), DC at (0, 0)
    base: str = "custom"
    dilations: Tuple[int, ...] = (1,)
    mode: str = "single"

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.spectrum)

    def distinct_levels(self, tol: float = 1e-9) -> int:
        """Number of distinct magnitude values, merging values closer than ``tol``."""
        vals = np.sort(self.magnitude.ravel())
        return int(1 + np.count_nonzero(np.diff(vals) > tol))


def embed_dilated(kernel: np.ndarray, d: int, n: int) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=np.float64)
    k0, k1 = kernel.shape
    if d < 1:
        raise ValueError(f"dilation must be >= 1, got {d}")
    if d * (max(k0, k1) - 1) + 1 > n:
        raise ValueError(f"{k0}x{k1} kernel at dilation {d} spans {d * (max(k0, k1) - 1) + 1} > grid {n}")
    grid = np.zeros((n, n))
    grid[: d * (k0 - 1) + 1: d, : d * (k1 - 1) + 1: d] = kernel
    # centre tap on the origin (wrapping), as a padded conv applies it, so
    # parallel sums of different dilations carry no relative phase
    return np.roll(grid, (-(d * (k0 // 2)), -(d * (k1 // 2))), axis=(0, 1))


def kernel_spectrum(kernel, d: int = 1, n: int = 64, base: str = "custom") -> SpectrumReport:
    """DFT of the kernel zero-dilated by ``d`` and centred on the grid origin."""
    return SpectrumReport(n, fft2(embed_dilated(kernel, d, n)), base, (d,), "single")


def composite_spectrum(kernel, dilations: Sequence[int], mode: str = "serial", n: int = 64,
                       base: str = "custom") -> SpectrumReport:
    """Serial composition multiplies the complex responses, parallel sums them."""
    dilations = tuple(int(d) for d in dilations)
    if not dilations:
        raise ValueError("composite spectrum needs at least one dilation")
    if mode not in ("serial", "parallel"):
        raise ValueError(f"mode must be serial or parallel, got {mode!r}")
    parts = [kernel_spectrum(kernel, d, n).spectrum for d in dilations]
    total = parts[0].copy()
    for p in parts[1:]:
        total = total * p if mode == "serial" else total + p
    return SpectrumReport(n, total, base, dilations, mode)


def write_spectrum_csv(path, report: SpectrumReport, recenter: bool = True) -> None:
    """Row-major magnitudes; DC moved to the grid center for display."""
    mag = report.magnitude
    if recenter:
        mag = np.roll(mag, (report.size // 2, report.size // 2), axis=(0, 1))
    lines = [f"# N={report.size} mode={report.mode}"]
    lines += [",".join(repr(float(v)) for v in row) for row in mag]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------- ERF
@dataclass
class ErfResult:
    gradient: np.ndarray  # (H, W) float64, |d out / d input| summed over channels
    heat: np.ndarray  # (H, W) uint8, max-normalized
    pixel: Tuple[int, int, int]

    def effective_radius(self, mass: float = 0.9) -> int:
        return effective_radius(self.gradient, self.pixel[1:], mass)


def _input_gradient(model: CasDyFNet, image: np.ndarray, pixel: Tuple[int, int, int]) -> np.ndarray:
    x = Tensor(image[None], requires_grad=True, dtype=model.store.dtype)
    out = model(x)[0]
    c, y, xx = pixel
    seed = np.zeros(out.shape)
    seed[0, c, y, xx] = 1.0
    out.backward(seed)
    model.store.zero_grad()
    return np.abs(x.grad[0].astype(np.float64)).sum(axis=0)


def erf_map(model: CasDyFNet, image, pixel: Tuple[int, int, int], average: Optional[int] = None,
            seed: int = 0) -> ErfResult:
    """Input-gradient magnitude of one output scalar, or the mean over
    ``average`` random output pixels of the same channel.

    The model runs in eval mode so the map does not depend on batch statistics.
    """
    image = np.asarray(getattr(image, "data", image))
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {image.shape}")
    c, y, x = (int(v) for v in pixel)
    cout, h, w = model.cfg.in_channels, image.shape[1], image.shape[2]
    if not (0 <= c < cout and 0 <= y < h and 0 <= x < w):
        raise IndexError(f"output pixel {(c, y, x)} outside ({cout}, {h}, {w})")
    was_training = model.training
    model.eval()
    try:
        if average:
            rng = np.random.default_rng(seed)
            pts = zip(rng.integers(0, h, size=average), rng.integers(0, w, size=average))
            grad = sum(_input_gradient(model, image, (c, int(py), int(px))) for py, px in pts) / average
        else:
            grad = _input_gradient(model, image, (c, y, x))
    finally:
        model.train(was_training)
    return ErfResult(grad, normalize_heat(grad), (c, y, x))


def normalize_heat(grad: np.ndarray) -> np.ndarray:
    top = grad.max()
    if top <= 0:
        return np.zeros(grad.shape, dtype=np.uint8)
    return np.clip(np.rint(grad / top * 255.0), 0, 255).astype(np.uint8)


def effective_radius(grad: np.ndarray, center: Tuple[int, int], mass: float = 0.9) -> int:
    """Smallest Chebyshev radius ``r`` around ``center`` whose window holds at
    least ``mass`` of the total gradient."""
    total = grad.sum()
    if total <= 0:
        return 0
    cy, cx = center
    h, w = grad.shape
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
    per_ring = np.bincount(dist.ravel(), weights=grad.ravel())
    covered = np.cumsum(per_ring) / total
    return int(np.argmax(covered >= mass - 1e-12))


def write_erf_pgm(path, result: ErfResult) -> None:
    write_pgm(path, ImageBuffer(result.heat.shape[1], result.heat.shape[0], result.heat[..., None]))


# --------------------------------------------------------------------- cost
@dataclass
class CostReport:
    height: int
    width: int
    params: "OrderedDict[str, int]" = field(default_factory=OrderedDict)
    macs: "OrderedDict[str, Counter]" = field(default_factory=OrderedDict)

    def add(self, module: str, params: int = 0, **macs: int) -> None:
        self.params[module] = self.params.get(module, 0) + int(params)
        bucket = self.macs.setdefault(module, Counter())
        for kind, n in macs.items():
            bucket[kind] += int(n)

    @staticmethod
    def _sum(counters) -> Counter:
        total = Counter()
        for c in counters:
            total.update(c)
        return total

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def macs_by_kind(self) -> Dict[str, int]:
        return dict(self._sum(self.macs.values()))

    @property
    def total_macs(self) -> int:
        return sum(self.macs_by_kind.values())

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    def to_dict(self) -> Dict:
        return {
            "input": [self.height, self.width],
            "modules": {k: {"params": self.params[k], "macs": dict(self.macs.get(k, {}))} for k in self.params},
            "total_params": self.total_params,
            "macs_by_kind": self.macs_by_kind,
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "reference": {"label": "published full model at 256x256 (calibration only)", **PUBLISHED_REFERENCE},
        }


def conv_cost(cin: int, cout: int, k: int, ho: int, wo: int, groups: int = 1, bias: bool = True) -> Tuple[int, int]:
    """(params, MACs) of one convolution with a ``ho`` x ``wo`` output."""
    w = cout * (cin // groups) * k * k
    return w + (cout if bias else 0), w * ho * wo


class _Tally:
    def __init__(self):
        self.params = 0
        self.macs = Counter()

    def conv(self, cin, cout, k, ho, wo, groups=1, bias=True):
        p, m = conv_cost(cin, cout, k, ho, wo, groups, bias)
        self.params += p
        self.macs["conv"] += m

    def norm(self, c, h, w):
        self.params += 2 * c
        self.macs["norm"] += c * h * w

    def gate(self, n):
        self.macs["gate"] += n


def _refiner_cost(t: _Tally, kind: str, c: int, h: int, w: int) -> None:
    if kind == "rmb":
        for _ in range(3):
            t.conv(c, c, 3, h, w)
        t.conv(3 * c, c, 1, h, w)
        t.conv(c, c, 1, h, w)
    elif kind == "rb":
        t.conv(c, c, 3, h, w)
        t.conv(c, c, 3, h, w)
    elif kind == "rdb":
        growth, layers = max(c // 2, 1), 3
        for j in range(layers):
            t.conv(c + j * growth, growth, 3, h, w)
        t.conv(c + layers * growth, c, 1, h, w)
    else:
        raise ValueError(f"unknown refinement block {kind!r}")


def _block_cost(cfg: ModelConfig, width: int, h: int, w: int) -> _Tally:
    t = _Tally()
    ccfg = cfg.cascade_config(width)
    n, cb, k = ccfg.branches, ccfg.branch_channels, ccfg.kernel_size
    if ccfg.strategy in ("dynamic", "fixed-conv"):
        for i in range(1, n):
            cin = ccfg.level_channels(i)
            if ccfg.strategy == "dynamic":
                t.conv(cin, k * k * cin, 1, 1, 1)
                t.norm(k * k * cin, 1, 1)
                t.macs["dynamic"] += cin * k * k * h * w
            else:
                t.conv(cin, cin, k, h, w)
            t.norm(cin, h, w)
            t.conv(cin, cb, 1, h, w)
            t.conv(cin, cin - cb, 1, h, w)
    elif ccfg.strategy == "resolution":
        for i in range(n):
            t.conv(width, cb, 1, h >> i, w >> i)
    refined = n if ccfg.rmb_last_branch else n - 1
    for _ in range(refined * ccfg.rmb_count):
        _refiner_cost(t, ccfg.refine_block, cb, h, w)
    if cfg.local_fusion:
        c3 = 3 * cb
        hidden = max(c3 // 4, 4)
        for _ in range(n):
            t.conv(c3, hidden, 1, 1, 1)
            t.conv(hidden, c3, 1, 1, 1)
            t.gate(c3 * h * w)
            t.conv(c3, cb, 1, h, w)
    if cfg.global_fusion:
        hidden = max(width // 8, 4)
        t.conv(width, width, 1, h, w)
        t.conv(width, hidden, 1, 1, 1)
        t.conv(hidden, width, 1, 1, 1)
        t.conv(2, 1, 7, h, w)
        t.conv(width, width, 1, h, w)
        t.gate(3 * width * h * w)
        t.conv(width, width, 1, h, w)
    return t


def count_params_flops(cfg: ModelConfig, height: int, width: int) -> CostReport:
    """Closed-form parameter and MAC counts of one forward pass on a single
    ``height`` x ``width`` image, itemized by top-level module."""
    if height % 4 or width % 4:
        raise ValueError(f"input H and W must be divisible by 4, got {height}x{width}")
    rep = CostReport(height, width)
    cin = cfg.in_channels
    c1, c2, c3 = cfg.stage_widths
    sizes = {1: (height, width), 2: (height // 2, width // 2), 3: (height // 4, width // 4)}

    def conv(name, ci, co, k, scale):
        p, m = conv_cost(ci, co, k, *sizes[scale])
        rep.add(name, p, conv=m)

    def blocks(name, wd, count, scale):
        for j in range(count):
            t = _block_cost(cfg, wd, *sizes[scale])
            rep.add(f"{name}.{j}", t.params, **t.macs)

    e1, e2, b, d2, d1 = cfg.depths
    conv("stem", cin, c1, 3, 1)
    blocks("enc1", c1, e1, 1)
    conv("down1", c1, c2, 3, 2)
    conv("inject2", cin, c2, 3, 2)
    blocks("enc2", c2, e2, 2)
    conv("down2", c2, c3, 3, 3)
    conv("inject3", cin, c3, 3, 3)
    blocks("bottleneck", c3, b, 3)
    conv("head3", c3, cin, 3, 3)
    conv("up2", c3, c2, 3, 2)
    blocks("dec2", c2, d2, 2)
    conv("head2", c2, cin, 3, 2)
    conv("up1", c2, c1, 3, 1)
    blocks("dec1", c1, d1, 1)
    conv("head1", c1, cin, 3, 1)
    return rep


def format_cost(rep: CostReport) -> str:
    lines = [f"{'module':<16}{'params':>12}{'MACs':>16}"]
    for name, p in rep.params.items():
        lines.append(f"{name:<16}{p:>12,}{sum(rep.macs.get(name, {}).values()):>16,}")
    lines.append(f"{'total':<16}{rep.total_params:>12,}{rep.total_macs:>16,}")
    lines.append(f"params {rep.total_params / 1e6:.3f}M  FLOPs {rep.total_flops / 1e9:.3f}G "
                 f"at {rep.height}x{rep.width}  (macs by kind: {rep.macs_by_kind})")
    lines.append(f"calibration reference, published full model at 256x256: "
                 f"{PUBLISHED_REFERENCE['params_m']}M params / {PUBLISHED_REFERENCE['flops_g']}G FLOPs (not asserted)")
    return "\n".join(lines)
