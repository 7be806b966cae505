"""Parameter containers and composite layers shared by the network modules."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import ops
from .tensor import Tensor, get_dtype


@dataclass(frozen=True)
class InitSpec:
    scheme: str  # "kaiming" | "linear" | "residual" | "head" | "zeros" | "ones"
    fan_in: int = 1


class ParamStore:
    """Ordered named map of learned tensors plus persistent (non-learned) state.

    Weights start at zero until :func:`init_params` draws them. ``training`` is
    the shared mode switch read by batch-norm layers.
    """

    def __init__(self, dtype=None):
        self.dtype = np.dtype(dtype or get_dtype()).type
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.states: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.init_specs: Dict[str, InitSpec] = {}
        self.training = True

    def _check_name(self, name):
        if name in self.params or name in self.states:
            raise KeyError(f"duplicate parameter name {name!r}")

    def param(self, name: str, shape: Tuple[int, ...], init: str = "kaiming", fan_in: int = 1) -> Tensor:
        self._check_name(name)
        t = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True, dtype=self.dtype)
        self.params[name] = t
        self.init_specs[name] = InitSpec(init, fan_in)
        if init == "ones":
            t.data[...] = 1
        return t

    def state(self, name: str, shape: Tuple[int, ...], fill: float = 0.0) -> np.ndarray:
        self._check_name(name)
        arr = np.full(shape, fill, dtype=self.dtype)
        self.states[name] = arr
        self.init_specs[name] = InitSpec("ones" if fill == 1.0 else "zeros")
        return arr

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for k, v in self.params.items():
            out[k] = v.data
        for k, v in self.states.items():
            out[k] = v
        return out

    def load_state_dict(self, tensors: Dict[str, np.ndarray]) -> None:
        """Copy arrays into the store in place; every name and shape must match."""
        expected = list(self.params) + list(self.states)
        missing = [k for k in expected if k not in tensors]
        extra = [k for k in tensors if k not in self.params and k not in self.states]
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k in expected:
            src = np.asarray(tensors[k])
            dst = self.params[k].data if k in self.params else self.states[k]
            if src.shape != dst.shape:
                raise ValueError(f"tensor {k!r}: checkpoint shape {src.shape} != model shape {dst.shape}")
        for k in expected:
            dst = self.params[k].data if k in self.params else self.states[k]
            dst[...] = tensors[k]

    def fill_(self, value: float) -> None:
        """Set every learned tensor to ``value`` (used for zero-weight identity checks)."""
        for p in self.params.values():
            p.data[...] = value


# squared gain per scheme: relu-followed convs keep unit output variance with
# gain sqrt(2), convs feeding linear paths (residual sums, gates) with gain 1,
# exits of residual refinement units with gain 0.5 so stacked units grow the
# signal slowly, output heads with gain 0.1 so the network starts near its
# global residual
_GAIN2 = {"kaiming": 6.0, "linear": 3.0, "residual": 0.75, "head": 0.03}


def _apply_init(t: Tensor, spec: InitSpec, rng: np.random.Generator) -> None:
    if spec.scheme in _GAIN2:
        bound = np.sqrt(_GAIN2[spec.scheme] / spec.fan_in)
        t.data[...] = rng.uniform(-bound, bound, size=t.shape)
    elif spec.scheme == "zeros":
        t.data[...] = 0
    elif spec.scheme == "ones":
        t.data[...] = 1
    else:
        raise ValueError(f"unknown init scheme {spec.scheme!r}")


def init_params(store: ParamStore, seed: int) -> None:
    """Deterministically (re)initialize every learned tensor and reset states.

    Conv weights get Kaiming-style uniform draws in +-sqrt(6 / fan_in) when a
    ReLU follows, +-sqrt(3 / fan_in) otherwise (``linear``); biases
    and norm shifts are zero, norm scales one. Draws follow store order from a
    single generator seeded with ``seed``.
    """
    rng = np.random.default_rng(seed)
    for name, p in store.params.items():
        _apply_init(p, store.init_specs[name], rng)
    for name, s in store.states.items():
        s[...] = 1.0 if store.init_specs[name].scheme == "ones" else 0.0


class Conv2d:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int = 3, stride: int = 1,
                 dilation: int = 1, groups: int = 1, bias: bool = True, padding: str = "reflect",
                 init: str = "linear"):
        if cin % groups or cout % groups:
            raise ValueError(f"{name}: channels {cin}->{cout} not divisible by groups={groups}")
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.dilation, self.groups, self.padding = stride, dilation, groups, padding
        fan_in = cin // groups * k * k
        self.weight = store.param(f"{name}.weight", (cout, cin // groups, k, k), init, fan_in)
        self.bias = store.param(f"{name}.bias", (cout,), "zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ValueError(f"conv expects {self.cin} input channels, got {x.shape[1]}")
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, dilation=self.dilation,
                          groups=self.groups, padding=self.padding)

    def num_params(self) -> int:
        n = self.cout * (self.cin // self.groups) * self.k * self.k
        return n + (self.cout if self.bias is not None else 0)

    def macs(self, h_out: int, w_out: int) -> int:
        return self.cout * (self.cin // self.groups) * self.k * self.k * h_out * w_out


class BatchNorm2d:
    def __init__(self, store: ParamStore, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.store = store
        self.channels = channels
        self.gamma = store.param(f"{name}.gamma", (channels,), "ones")
        self.beta = store.param(f"{name}.beta", (channels,), "zeros")
        self.running_mean = store.state(f"{name}.running_mean", (channels,), 0.0)
        self.running_var = store.state(f"{name}.running_var", (channels,), 1.0)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.store.training, self.momentum, self.eps)


class ConvBlock:
    """conv -> optional batch-norm -> optional ReLU."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int = 3, stride: int = 1,
                 dilation: int = 1, groups: int = 1, norm: bool = False, act: str = "none"):
        if act not in ("relu", "none"):
            raise ValueError(f"unknown activation {act!r}")
        self.conv = Conv2d(store, f"{name}.conv", cin, cout, k, stride, dilation, groups,
                           init="kaiming" if act == "relu" and not norm else "linear")
        self.norm = BatchNorm2d(store, f"{name}.norm", cout) if norm else None
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.norm is not None:
            y = self.norm(y)
        if self.act == "relu":
            y = ops.relu(y)
        return y

    def num_params(self) -> int:
        return self.conv.num_params() + (2 * self.conv.cout if self.norm is not None else 0)


class Downsample:
    """Stride-2 3x3 conv halving H and W."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int):
        self.conv = Conv2d(store, name, cin, cout, k=3, stride=2)

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ValueError(f"downsample needs even H and W, got {h}x{w}")
        return self.conv(x)


class Upsample:
    """Bilinear x2 resize followed by a 3x3 conv."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int):
        self.conv = Conv2d(store, name, cin, cout, k=3)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(ops.resize(x, 2))
