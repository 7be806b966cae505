"""Command-line entry point: ``python -m casdyf <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import analysis
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ImageBuffer, load_paired_dir, read_ppm, synthetic_pairs, write_ppm
from .network import CasDyFNet, ModelConfig
from .tensor import Tensor, no_grad
from .training import TrainConfig, evaluate, fit, model_checkpoint, model_from_checkpoint

log = logging.getLogger("casdyf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _pixel(text: str):
    vals = _int_list(text)
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"pixel must be c,y,x, got {text!r}")
    return tuple(vals)


def _read_config(path: Optional[str]):
    """JSON file holding model fields, or ``{"model": {...}, "train": {...}}``."""
    if not path:
        return ModelConfig(), {}
    raw = json.loads(Path(path).read_text())
    if "model" in raw or "train" in raw:
        return ModelConfig.from_dict(raw.get("model", {})), dict(raw.get("train", {}))
    return ModelConfig.from_dict(raw), {}


def _dataset(args, split_seed: int):
    if getattr(args, "data", None):
        return load_paired_dir(args.data)
    return synthetic_pairs(args.synthetic_count, args.image_size, seed=split_seed)


def pad_multiple(cfg: ModelConfig) -> int:
    extra = 1 << (cfg.branches - 1) if cfg.strategy == "resolution" else 1
    return 4 * extra


def min_input_side(cfg: ModelConfig) -> int:
    """Smallest H or W whose quarter-scale maps can take the widest reflect pad
    (dilated refinement convs, or the 7x7 spatial gate)."""
    widest = 3 if cfg.global_fusion else 1
    if cfg.rmb_count and cfg.refine_block == "rmb":
        widest = max(widest, *cfg.dilations)
    m = pad_multiple(cfg)
    return -(-4 * (widest + 1) // m) * m


def dehaze_image(model: CasDyFNet, hazy: np.ndarray) -> np.ndarray:
    """Reflect-pad a (C, H, W) image to the model's size multiple (and minimum
    size), run the network and crop back. Returns values clipped to [0, 1]."""
    m = pad_multiple(model.cfg)
    lo = min_input_side(model.cfg)
    h, w = hazy.shape[1:]
    ph, pw = max(-h % m, lo - h), max(-w % m, lo - w)
    x = np.pad(hazy, ((0, 0), (0, ph), (0, pw)), mode="reflect") if ph or pw else hazy
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            out = model(Tensor(x[None], dtype=model.store.dtype))[0].data[0]
    finally:
        model.train(was_training)
    return np.clip(out[:, :h, :w], 0.0, 1.0)


# ----------------------------------------------------------------- commands
def cmd_train(args) -> int:
    model_cfg, train_over = _read_config(args.config)
    fields = dict(train_over)
    for key in ("steps", "batch_size", "patch_size", "lr", "lam", "eval_every", "ckpt_every"):
        val = getattr(args, key)
        if val is not None:
            fields[key] = val
    fields["seed"] = args.seed
    out = Path(args.out_dir)
    fields["ckpt_dir"] = str(out)
    train_cfg = TrainConfig(**fields)
    train = _dataset(args, args.seed)
    test = load_paired_dir(args.test_data) if args.test_data else synthetic_pairs(
        args.test_count, args.image_size, seed=args.seed + 1)
    resume = load_checkpoint(args.resume) if args.resume else None
    model, report, _ = fit(model_cfg, train, train_cfg, test_pairs=test, resume=resume, dtype=args.dtype)
    report.write_csv(out / "report.csv")
    save_checkpoint(out / "model.cdyf", model_checkpoint(model))
    scores = evaluate(model, test)
    print(json.dumps({"steps": train_cfg.steps, "final_loss": report.losses[-1] if report.losses else None,
                      **scores}, indent=2))
    return 0


def cmd_infer(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    img = read_ppm(args.input)
    write_ppm(args.output, ImageBuffer.from_array(dehaze_image(model, img.to_array(model.store.dtype))))
    return 0


def cmd_eval(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    pairs = _dataset(args, args.seed)
    print(json.dumps(evaluate(model, pairs), indent=2))
    return 0


def cmd_spectrum(args) -> int:
    kernel = analysis.BASE_KERNELS[args.base]
    if args.mode == "single":
        if len(args.dilations) != 1:
            raise UsageError("--mode single takes exactly one dilation")
        rep = analysis.kernel_spectrum(kernel, args.dilations[0], args.size, args.base)
    else:
        rep = analysis.composite_spectrum(kernel, args.dilations, args.mode, args.size, args.base)
    analysis.write_spectrum_csv(args.out, rep)
    log.info("wrote %dx%d magnitudes to %s (%d distinct levels)", rep.size, rep.size, args.out,
             rep.distinct_levels())
    return 0


def cmd_erf(args) -> int:
    if args.ckpt:
        model = model_from_checkpoint(load_checkpoint(args.ckpt))
    else:
        model_cfg, _ = _read_config(args.config)
        model = CasDyFNet(model_cfg, seed=args.seed)
    image = read_ppm(args.input).to_array(model.store.dtype)
    res = analysis.erf_map(model, image, args.pixel, average=args.average, seed=args.seed)
    analysis.write_erf_pgm(args.out, res)
    print(json.dumps({"pixel": list(res.pixel), "effective_radius": res.effective_radius()}))
    return 0


def cmd_count(args) -> int:
    model_cfg, _ = _read_config(args.config)
    rep = analysis.count_params_flops(model_cfg, *args.size)
    print(json.dumps(rep.to_dict(), indent=2))
    print(analysis.format_cost(rep), file=sys.stderr)
    return 0


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="casdyf", description="Cascaded dynamic-filter dehazing network")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def data_flags(q):
        q.add_argument("--data", help="paired directory with hazy/ and clear/ PPMs (default: synthetic)")
        q.add_argument("--synthetic-count", type=int, default=64)
        q.add_argument("--image-size", type=int, default=64)

    t = sub.add_parser("train", help="train a model", parents=[common])
    t.add_argument("--config")
    data_flags(t)
    t.add_argument("--test-data")
    t.add_argument("--test-count", type=int, default=16)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lam", type=float)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--ckpt-every", type=int)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume")
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="dehaze one PPM image", parents=[common])
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a paired set", parents=[common])
    e.add_argument("--ckpt", required=True)
    data_flags(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="spectrum and receptive-field analysis")
    asub = a.add_subparsers(dest="analysis", parser_class=_Parser)
    asub.required = True
    s = asub.add_parser("spectrum", help="frequency response of dilated base kernels", parents=[common])
    s.add_argument("--base", choices=sorted(analysis.BASE_KERNELS), default="avg3")
    s.add_argument("--dilations", type=_int_list, default=[1])
    s.add_argument("--mode", choices=("serial", "parallel", "single"), default="single")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_spectrum)
    r = asub.add_parser("erf", help="effective receptive field heat map", parents=[common])
    r.add_argument("--ckpt", help="trained checkpoint (default: random init from --config and --seed)")
    r.add_argument("--config")
    r.add_argument("--input", required=True)
    r.add_argument("--pixel", type=_pixel, required=True, help="output pixel c,y,x")
    r.add_argument("--average", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_erf)

    c = sub.add_parser("count", help="closed-form parameter and FLOP counts", parents=[common])
    c.add_argument("--config")
    c.add_argument("--size", type=int, nargs=2, default=(256, 256), metavar=("H", "W"))
    c.set_defaults(func=cmd_count)
    return p


def _thread_limit():
    n = os.environ.get("CASDYF_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
