"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    n_checked: int
    analytic: np.ndarray = None
    numeric: np.ndarray = None
    n_skipped: int = 0  # probes whose stencil crossed a relu/abs/max kink on both sides
    n_one_sided: int = 0


def _projected_scalar(fn, tensors, proj):
    """Projected output and the branch pattern of every piecewise op hit."""
    with no_grad(), ops.record_kinks() as kinks:
        out = fn(*tensors)
        if isinstance(out, (list, tuple)):
            val = sum(float((o.data.astype(np.float64) * p).sum()) for o, p in zip(out, proj))
        else:
            val = float((out.data.astype(np.float64) * proj).sum())
    return val, kinks


def _same_branch(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(
    fn: Callable,
    inputs: Sequence[Tensor],
    names: Optional[Sequence[str]] = None,
    h: Optional[float] = None,
    max_entries: Optional[int] = 40,
    seed: int = 0,
    floor: float = 1e-3,
) -> Dict[str, GradCheckResult]:
    """Compare analytic and finite-difference gradients of a random projection
    of ``fn(*inputs)`` w.r.t. every tensor in ``inputs``.

    The relative error per tensor is ``||a - n|| / max(||a||, ||n||)`` over the
    checked entries; ``max_entries`` caps how many entries per tensor are probed.
    Central differences are meaningless across a kink, so a probe whose +h or -h
    point changes the branch of any relu, abs or channel max falls back to the
    one-sided difference on the clean side, or is replaced by another entry if
    both sides cross. ``floor`` (default 1e-3) bounds the denominator from below, relative to the
    largest RMS gradient entry of any checked tensor, so a gradient that is
    exactly zero (a bias ahead of batch norm) is compared against
    finite-difference noise on the scale of the whole check.
    ``fn`` may mutate state (e.g. running statistics) but its output must not
    depend on that state.
    """
    rng = np.random.default_rng(seed)
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    dtype = inputs[0].dtype
    if h is None:
        h = 1e-5 if dtype == np.float64 else 1e-3

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    outs = list(out) if isinstance(out, (list, tuple)) else [out]
    proj = [rng.standard_normal(o.shape) for o in outs]
    total = None
    for o, p in zip(outs, proj):
        term = ops.sum_(ops.mul(o, Tensor(p, dtype=o.dtype)))
        total = term if total is None else ops.add(total, term)
    total.backward()
    proj_arg = proj if isinstance(out, (list, tuple)) else proj[0]

    f0, base = _projected_scalar(fn, inputs, proj_arg)
    results = {}
    for t, name in zip(inputs, names):
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        flat = t.data.reshape(-1)
        want = flat.size if max_entries is None else min(max_entries, flat.size)
        ana, num, skipped, one_sided = [], [], 0, 0
        # probe entries in random order, skipping stencils that cross a kink
        for i in rng.permutation(flat.size):
            if len(num) == want:
                break
            old = flat[i]
            flat[i] = old + h
            fp, kp = _projected_scalar(fn, inputs, proj_arg)
            flat[i] = old - h
            fm, km = _projected_scalar(fn, inputs, proj_arg)
            flat[i] = old
            plus_ok, minus_ok = _same_branch(kp, base), _same_branch(km, base)
            if plus_ok and minus_ok:
                num.append((fp - fm) / (2 * h))
            elif plus_ok or minus_ok:
                # one side crosses: one-sided difference on the clean side
                num.append((fp - f0) / h if plus_ok else (f0 - fm) / h)
                one_sided += 1
            else:
                skipped += 1
                continue
            ana.append(analytic.reshape(-1)[i])
        results[name] = GradCheckResult(name, float("nan"), len(num), np.array(ana), np.array(num), skipped,
                                        one_sided)
    # tensors are compared against their own norm, but never against less
    # than ``floor`` times the typical gradient entry of the whole check
    scale = max((np.sqrt(np.mean(r.analytic ** 2)) for r in results.values() if r.n_checked), default=0.0)
    for r in results.values():
        if r.n_checked:
            denom = max(np.linalg.norm(r.analytic), np.linalg.norm(r.numeric),
                        floor * scale * np.sqrt(r.n_checked), 1e-30)
            r.rel_error = float(np.linalg.norm(r.analytic - r.numeric) / denom)
    return results


def max_rel_error(results: Dict[str, GradCheckResult]) -> float:
    """Worst per-tensor error; a tensor with no usable probe counts as a failure."""
    return max(r.rel_error if r.n_checked else float("inf") for r in results.values())


def joint_rel_error(results: Dict[str, GradCheckResult]) -> float:
    """Relative error of all checked entries taken as one gradient vector."""
    ana = np.concatenate([r.analytic for r in results.values()])
    num = np.concatenate([r.numeric for r in results.values()])
    return float(np.linalg.norm(ana - num) / max(np.linalg.norm(ana), np.linalg.norm(num), 1e-30))
