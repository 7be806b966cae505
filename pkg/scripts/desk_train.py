"""Desk-profile training run on synthetic haze.

Trains the default model on 64 synthetic 64x64 pairs (32x32 patches, batch 4)
and reports test PSNR against the hazy inputs.

    python scripts/desk_train.py --steps 2000 --out runs/desk
"""
import argparse
import json
import time
import warnings
from pathlib import Path

from threadpoolctl import threadpool_limits

from casdyf.checkpoint import save_checkpoint
from casdyf.data import synthetic_pairs
from casdyf.network import ModelConfig
from casdyf.training import TrainConfig, evaluate, fit, model_checkpoint


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", default="dynamic")
    p.add_argument("--out", default="runs/desk")
    args = p.parse_args()
    warnings.simplefilter("ignore")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = synthetic_pairs(64, 64, seed=0)
    test = synthetic_pairs(16, 64, seed=1)
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        model, report, _ = fit(ModelConfig(strategy=args.strategy), train,
                               TrainConfig(steps=args.steps, seed=args.seed, log_every=0),
                               test_pairs=test)
    scores = evaluate(model, test)
    report.write_csv(out / "report.csv")
    save_checkpoint(out / "model.cdyf", model_checkpoint(model))
    losses = report.losses
    print(json.dumps({
        "minutes": round((time.perf_counter() - t0) / 60, 2),
        "loss_step10": losses[min(9, len(losses) - 1)],
        "loss_final": losses[-1],
        "psnr_gain_db": scores["psnr"] - scores["hazy_psnr"],
        **scores,
    }, indent=2))


if __name__ == "__main__":
    main()
