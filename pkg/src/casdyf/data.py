"""Image files, paired datasets, patch sampling and synthetic haze."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .tensor import Tensor, get_dtype


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageBuffer:
    """8-bit image, ``pixels`` shaped (height, width, channels), row-major."""

    width: int
    height: int
    pixels: np.ndarray

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def to_array(self, dtype=None) -> np.ndarray:
        """(C, H, W) floats in [0, 1]."""
        return (self.pixels.transpose(2, 0, 1).astype(np.float64) / 255.0).astype(dtype or get_dtype())

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageBuffer":
        arr = np.asarray(getattr(arr, "data", arr), dtype=np.float64)
        if arr.ndim == 4:
            if arr.shape[0] != 1:
                raise ValueError(f"expected a single image, got batch of {arr.shape[0]}")
            arr = arr[0]
        if arr.ndim == 2:
            arr = arr[None]
        px = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        return cls(px.shape[1], px.shape[0], np.ascontiguousarray(px))


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_netpbm(data: bytes, magic: bytes, channels: int) -> ImageBuffer:
    if data[:2] != magic:
        found = data[:2].decode("latin-1")
        raise ImageFormatError(f"offset 0: expected binary {magic.decode()} header, found {found!r}"
                               + (" (only binary P6/P5 is supported)" if found in ("P3", "P2") else ""))
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise ImageFormatError(f"offset {pos}: truncated header")
        tok = m.group(1)
        if not tok.isdigit():
            raise ImageFormatError(f"offset {m.start(1)}: expected an integer, found {tok[:16]!r}")
        fields.append(int(tok))
        pos = m.end(1)
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"offset {pos}: maxval {maxval} unsupported (only 255)")
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise ImageFormatError(f"offset {pos}: missing whitespace before pixel data")
    pos += 1
    need = width * height * channels
    have = len(data) - pos
    if have < need:
        raise ImageFormatError(f"offset {pos}: short payload, need {need} bytes, have {have}")
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width, channels)
    return ImageBuffer(width, height, px.copy())


def read_ppm(path) -> ImageBuffer:
    return _read_netpbm(Path(path).read_bytes(), b"P6", 3)


def read_pgm(path) -> ImageBuffer:
    return _read_netpbm(Path(path).read_bytes(), b"P5", 1)


def ppm_bytes(img: ImageBuffer) -> bytes:
    magic = {3: b"P6", 1: b"P5"}.get(img.channels)
    if magic is None:
        raise ImageFormatError(f"cannot encode {img.channels}-channel image as PPM/PGM")
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    return header + np.ascontiguousarray(img.pixels, dtype=np.uint8).tobytes()


def write_ppm(path, img: ImageBuffer) -> None:
    if img.channels != 3:
        raise ImageFormatError(f"PPM needs 3 channels, got {img.channels}")
    Path(path).write_bytes(ppm_bytes(img))


def write_pgm(path, img: ImageBuffer) -> None:
    if img.channels != 1:
        raise ImageFormatError(f"PGM needs 1 channel, got {img.channels}")
    Path(path).write_bytes(ppm_bytes(img))


# ------------------------------------------------------------------ haze
@dataclass
class HazeParams:
    airlight: np.ndarray  # (3,) in [0, 1]
    beta: float
    depth: np.ndarray  # (H, W), >= 0

    def transmission(self) -> np.ndarray:
        return np.exp(-self.beta * self.depth)


def synth_haze(clear: np.ndarray, params: HazeParams) -> np.ndarray:
    """Atmospheric scattering model I = J t + A (1 - t), t = exp(-beta d)."""
    if params.beta <= 0:
        raise ValueError(f"scattering coefficient must be positive, got {params.beta}")
    if np.any(params.depth < 0):
        raise ValueError("depth map must be non-negative")
    clear = np.asarray(clear)
    t = params.transmission()[None]
    a = np.asarray(params.airlight, dtype=np.float64).reshape(-1, 1, 1)
    out = clear * t + a * (1.0 - t)
    return np.clip(out, 0.0, 1.0).astype(clear.dtype)


def random_depth(h: int, w: int, rng: np.random.Generator, lo: float = 0.3, hi: float = 1.5,
                 terms: int = 4) -> np.ndarray:
    """Smooth depth field: a few random low-frequency cosines rescaled to [lo, hi]."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    field = np.zeros((h, w))
    for _ in range(terms):
        fy, fx = rng.uniform(-1.5, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    field -= field.min()
    span = field.max()
    field = field / span if span > 0 else field
    return lo + (hi - lo) * field


def random_scene(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural clear image (3, H, W): smooth color background, flat shapes
    with sharp edges and a light fine texture."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((3, h, w))
    for c in range(3):
        gy, gx = rng.uniform(-0.5, 0.5, size=2)
        img[c] = rng.uniform(0.2, 0.7) + gy * yy + gx * xx
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0.0, 1.0, size=3)
        if rng.random() < 0.5:
            y0, x0 = rng.uniform(0, 1, size=2)
            y1, x1 = y0 + rng.uniform(0.1, 0.5), x0 + rng.uniform(0.1, 0.5)
            mask = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        else:
            cy, cx = rng.uniform(0, 1, size=2)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rng.uniform(0.05, 0.25) ** 2
        img[:, mask] = color[:, None]
    freq = rng.uniform(4, 10)
    img += 0.05 * np.sin(2 * np.pi * freq * (xx + rng.uniform(0.5, 1.5) * yy))[None]
    return np.clip(img, 0.0, 1.0)


@dataclass
class HazyPair:
    hazy: np.ndarray  # (3, H, W)
    clear: np.ndarray
    params: Optional[HazeParams] = None
    name: str = ""


def synthetic_pairs(count: int, size: int, seed: int, beta_range=(0.5, 2.0),
                    airlight_range=(0.6, 0.95), dtype=None) -> List[HazyPair]:
    """Deterministic list of synthetic hazy/clear pairs (image ``j`` depends
    only on ``(seed, j)``)."""
    dtype = dtype or get_dtype()
    pairs = []
    for j in range(count):
        rng = np.random.default_rng([seed, j])
        clear = random_scene(size, size, rng)
        params = HazeParams(
            airlight=np.full(3, rng.uniform(*airlight_range)) + rng.uniform(-0.02, 0.02, size=3),
            beta=float(rng.uniform(*beta_range)),
            depth=random_depth(size, size, rng),
        )
        params.airlight = np.clip(params.airlight, 0.0, 1.0)
        hazy = synth_haze(clear, params)
        pairs.append(HazyPair(hazy.astype(dtype), clear.astype(dtype), params, f"synth{j:04d}"))
    return pairs


def load_paired_dir(root) -> List[HazyPair]:
    """Pairs ``<root>/hazy/<name>.ppm`` with ``<root>/clear/<name>.ppm``."""
    root = Path(root)
    hazy_dir, clear_dir = root / "hazy", root / "clear"
    if not hazy_dir.is_dir() or not clear_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain hazy/ and clear/ subdirectories")
    pairs = []
    for hp in sorted(hazy_dir.glob("*.ppm")):
        cp = clear_dir / hp.name
        if not cp.exists():
            raise FileNotFoundError(f"no clear image for {hp.name}")
        h, c = read_ppm(hp), read_ppm(cp)
        if (h.width, h.height) != (c.width, c.height):
            raise ValueError(f"{hp.name}: hazy {h.width}x{h.height} vs clear {c.width}x{c.height}")
        pairs.append(HazyPair(h.to_array(), c.to_array(), None, hp.stem))
    if not pairs:
        raise ValueError(f"no .ppm pairs found under {root}")
    return pairs


def write_paired_dir(root, pairs: Sequence[HazyPair]) -> None:
    root = Path(root)
    (root / "hazy").mkdir(parents=True, exist_ok=True)
    (root / "clear").mkdir(parents=True, exist_ok=True)
    for p in pairs:
        write_ppm(root / "hazy" / f"{p.name}.ppm", ImageBuffer.from_array(p.hazy))
        write_ppm(root / "clear" / f"{p.name}.ppm", ImageBuffer.from_array(p.clear))


def crop_window(shape_hw: Tuple[int, int], size: int, rng: np.random.Generator) -> Tuple[int, int]:
    h, w = shape_hw
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image size {h}x{w}")
    return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))


def sample_patch(pair: HazyPair, size: int, seed, flip: bool = True) -> Dict[str, np.ndarray]:
    """Aligned crop of both images plus clear targets at 1/2 and 1/4 scale.

    The same window and flip decision apply to hazy and clear.
    """
    if size % 4:
        raise ValueError(f"patch size must be divisible by 4, got {size}")
    rng = np.random.default_rng(seed)
    y, x = crop_window(pair.hazy.shape[1:], size, rng)
    hz = pair.hazy[:, y:y + size, x:x + size]
    cl = pair.clear[:, y:y + size, x:x + size]
    if flip and rng.random() < 0.5:
        hz, cl = hz[:, :, ::-1], cl[:, :, ::-1]
    hz, cl = np.ascontiguousarray(hz), np.ascontiguousarray(cl)
    half = ops.resize(Tensor(cl[None], dtype=cl.dtype), 0.5)
    quarter = ops.resize(half, 0.5)
    return {"hazy": hz, "clear": cl, "clear_half": half.data[0], "clear_quarter": quarter.data[0],
            "window": (y, x)}


def make_batch(pairs: Sequence[HazyPair], batch: int, size: int, seed: int, step: int, flip: bool = True):
    """Batch for one training step, a pure function of ``(seed, step)``."""
    rng = np.random.default_rng([seed, step])
    idx = rng.integers(0, len(pairs), size=batch)
    patches = [sample_patch(pairs[i], size, [seed, step, k], flip) for k, i in enumerate(idx)]
    stack = {k: np.stack([p[k] for p in patches]) for k in ("hazy", "clear", "clear_half", "clear_quarter")}
    return stack
