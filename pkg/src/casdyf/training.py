"""Multi-scale spatial + frequency loss, Adam, cosine schedule and the
training loop."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .checkpoint import Checkpoint, save_checkpoint
from .data import HazyPair, make_batch
from .metrics import PSNR_CAP, psnr, ssim
from .network import CasDyFNet, ModelConfig
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)


# -------------------------------------------------------------------- loss
@dataclass
class LossConfig:
    lam: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"frequency weight must be >= 0, got {self.lam}")


def loss_terms(cfg: LossConfig, preds: Sequence[Tensor], targets: Sequence[Tensor]) -> Tuple[Tensor, Tensor, Tensor]:
    """Return ``(total, spatial, frequency)``; ``frequency`` is unweighted.

    Per scale: mean absolute error plus ``lam`` times the summed absolute
    real and imaginary spectrum differences, both divided by the element count.
    """
    if len(preds) != len(targets):
        raise ValueError(f"{len(preds)} predictions vs {len(targets)} targets")
    spatial = freq = None
    for s, (p, t) in enumerate(zip(preds, targets), start=1):
        if p.shape != t.shape:
            raise ValueError(f"scale {s}: prediction {p.shape} vs target {t.shape}")
        n = p.data.size
        diff = p - t
        sp = ops.mean(ops.abs_(diff))
        spec = ops.dft2(diff)
        fr = ops.mul(ops.add(ops.sum_(ops.abs_(spec.real)), ops.sum_(ops.abs_(spec.imag))), 1.0 / n)
        spatial = sp if spatial is None else spatial + sp
        freq = fr if freq is None else freq + fr
    total = spatial + ops.mul(freq, cfg.lam)
    return total, spatial, freq


def multiscale_loss(cfg: LossConfig, preds: Sequence[Tensor], targets: Sequence[Tensor]) -> Tensor:
    return loss_terms(cfg, preds, targets)[0]


# ---------------------------------------------------------------- schedule
@dataclass
class ScheduleConfig:
    lr: float = 4e-4
    lr_min: float = 1e-6
    total_steps: int = 2000

    def __post_init__(self):
        if self.lr_min > self.lr:
            raise ValueError("lr_min must not exceed lr")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def cosine_lr(cfg: ScheduleConfig, step: int) -> float:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step >= cfg.total_steps:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * step / cfg.total_steps))


# --------------------------------------------------------------- optimizer
@dataclass
class OptimState:
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, named_params, **kw) -> "OptimState":
        m = OrderedDict((k, np.zeros_like(p.data)) for k, p in named_params)
        v = OrderedDict((k, np.zeros_like(a)) for k, a in m.items())
        return cls(m, v, **kw)


class GradientError(FloatingPointError):
    pass


def optimizer_step(state: OptimState, named_params, rate: float) -> None:
    """Bias-corrected adaptive-moment update in place; clears gradients.

    Parameters without a gradient are treated as having a zero gradient.
    Non-finite gradients abort before anything is modified.
    """
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise GradientError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (rate * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
        p.grad = None


# ------------------------------------------------------------------ fitting
@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    patch_size: int = 32
    lr: float = 4e-4
    lr_min: float = 1e-6
    lam: float = 0.1
    seed: int = 0
    flip: bool = True
    eval_every: int = 0
    ckpt_every: int = 0
    ckpt_dir: Optional[str] = None
    log_every: int = 100

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.lr, self.lr_min, self.steps)


REPORT_FIELDS = ("step", "lr", "loss", "loss_spatial", "loss_freq", "psnr", "ssim")


@dataclass
class TrainReport:
    rows: List[Dict] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r["loss"] for r in self.rows if r.get("loss") is not None]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_FIELDS)
            for r in self.rows:
                out = []
                for k in REPORT_FIELDS:
                    v = r.get(k)
                    if v is None:
                        out.append("")
                    elif k == "psnr":
                        out.append(repr(min(float(v), PSNR_CAP)))
                    else:
                        out.append(repr(v))
                w.writerow(out)


class TrainingDiverged(RuntimeError):
    pass


def training_checkpoint(model: CasDyFNet, optim: OptimState, step: int, train_cfg: TrainConfig) -> Checkpoint:
    tensors = OrderedDict(model.store.state_dict())
    for k, a in optim.m.items():
        tensors[f"optim.m.{k}"] = a
    for k, a in optim.v.items():
        tensors[f"optim.v.{k}"] = a
    meta = {
        "step": step,
        "seed": train_cfg.seed,
        "dtype": np.dtype(model.store.dtype).name,
        "optim": {"step": optim.step, "beta1": optim.beta1, "beta2": optim.beta2, "eps": optim.eps},
        "train": dataclasses.asdict(train_cfg),
    }
    return Checkpoint(model.cfg.to_dict(), tensors, meta)


def model_checkpoint(model: CasDyFNet) -> Checkpoint:
    return Checkpoint(model.cfg.to_dict(), OrderedDict(model.store.state_dict()),
                      {"dtype": np.dtype(model.store.dtype).name})


def model_from_checkpoint(ckpt: Checkpoint, dtype=None) -> CasDyFNet:
    """Build a model from a checkpoint; ``dtype`` overrides the stored dtype."""
    dtype = dtype or ckpt.meta.get("dtype", "float32")
    model = CasDyFNet(ModelConfig.from_dict(ckpt.config), seed=0, dtype=dtype)
    load_model_state(model, ckpt)
    return model


def load_model_state(model: CasDyFNet, ckpt: Checkpoint) -> None:
    model.store.load_state_dict({k: v for k, v in ckpt.tensors.items() if not k.startswith("optim.")})


def _optim_from_checkpoint(model: CasDyFNet, ckpt: Checkpoint) -> OptimState:
    o = ckpt.meta["optim"]
    state = OptimState.for_params(model.store.named_parameters(), beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
    state.step = int(o["step"])
    for k in state.m:
        state.m[k][...] = ckpt.tensors[f"optim.m.{k}"]
        state.v[k][...] = ckpt.tensors[f"optim.v.{k}"]
    return state


def evaluate(model: CasDyFNet, pairs: Sequence[HazyPair]) -> Dict[str, float]:
    """Mean PSNR/SSIM of the full-resolution prediction and of the hazy input."""
    was_training = model.training
    model.eval()
    scores = {"psnr": [], "ssim": [], "hazy_psnr": [], "hazy_ssim": []}
    try:
        with no_grad():
            for p in pairs:
                x = Tensor(p.hazy[None], dtype=model.store.dtype)
                out = np.clip(model(x)[0].data[0], 0.0, 1.0)
                scores["psnr"].append(min(psnr(out, p.clear), PSNR_CAP))
                scores["ssim"].append(ssim(out, p.clear))
                scores["hazy_psnr"].append(min(psnr(p.hazy, p.clear), PSNR_CAP))
                scores["hazy_ssim"].append(ssim(p.hazy, p.clear))
    finally:
        model.train(was_training)
    return {k: float(np.mean(v)) for k, v in scores.items()}


def train_step(model: CasDyFNet, optim: OptimState, batch: Dict[str, np.ndarray], loss_cfg: LossConfig,
               rate: float) -> Tuple[float, float, float]:
    dt = model.store.dtype
    x = Tensor(batch["hazy"], dtype=dt)
    targets = [Tensor(batch[k], dtype=dt) for k in ("clear", "clear_half", "clear_quarter")]
    preds = model(x)
    total, spatial, freq = loss_terms(loss_cfg, preds, targets)
    value = float(total.data)
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value}")
    total.backward()
    optimizer_step(optim, model.store.named_parameters(), rate)
    return value, float(spatial.data), float(freq.data)


def fit(
    model_cfg: ModelConfig,
    train_pairs: Sequence[HazyPair],
    train_cfg: TrainConfig,
    test_pairs: Optional[Sequence[HazyPair]] = None,
    resume: Optional[Checkpoint] = None,
    stop_at: Optional[int] = None,
    dtype=None,
) -> Tuple[CasDyFNet, TrainReport, OptimState]:
    """Train for ``train_cfg.steps`` steps (or until ``stop_at``).

    Step ``t`` draws its batch from ``(seed, t)`` only, so a run resumed from
    a checkpoint written after step ``k`` continues bit-identically.
    """
    if not train_pairs:
        raise ValueError("training set is empty")
    if resume is not None:
        model = model_from_checkpoint(resume, dtype)
        model_cfg = model.cfg
        optim = _optim_from_checkpoint(model, resume)
        start = int(resume.meta["step"])
    else:
        model = CasDyFNet(model_cfg, seed=train_cfg.seed, dtype=dtype)
        optim = OptimState.for_params(model.store.named_parameters())
        start = 0
    model.train()
    loss_cfg = LossConfig(train_cfg.lam)
    sched = train_cfg.schedule()
    report = TrainReport()
    end = train_cfg.steps if stop_at is None else min(stop_at, train_cfg.steps)
    ckpt_dir = Path(train_cfg.ckpt_dir) if train_cfg.ckpt_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for t in range(start, end):
        rate = cosine_lr(sched, t)
        batch = make_batch(train_pairs, train_cfg.batch_size, train_cfg.patch_size, train_cfg.seed, t,
                           train_cfg.flip)
        try:
            loss, sp, fr = train_step(model, optim, batch, loss_cfg, rate)
        except (NonFiniteError, FloatingPointError) as exc:
            raise TrainingDiverged(f"step {t}: {exc}; last good checkpoint kept in {ckpt_dir}") from exc
        row = {"step": t + 1, "lr": rate, "loss": loss, "loss_spatial": sp, "loss_freq": fr}
        done = t + 1
        if test_pairs and (done == end or (train_cfg.eval_every and done % train_cfg.eval_every == 0)):
            ev = evaluate(model, test_pairs)
            row["psnr"], row["ssim"] = ev["psnr"], ev["ssim"]
        report.rows.append(row)
        if train_cfg.log_every and done % train_cfg.log_every == 0:
            log.info("step %d lr %.3g loss %.5f", done, rate, loss)
        if ckpt_dir and train_cfg.ckpt_every and done % train_cfg.ckpt_every == 0:
            save_checkpoint(ckpt_dir / f"step{done:06d}.cdyf", training_checkpoint(model, optim, done, train_cfg))
    if ckpt_dir:
        save_checkpoint(ckpt_dir / "last.cdyf", training_checkpoint(model, optim, end, train_cfg))
    return model, report, optim
