"""Branch-strategy ablation at desk scale.

Trains each strategy on the same synthetic set with the same budget for a few
seeds and prints parameters and test PSNR per run.

    python scripts/ablation.py --steps 300 --seeds 0 1 2 --strategies dynamic split
"""
import argparse
import json
import time
import warnings

from casdyf.data import synthetic_pairs
from casdyf.network import ModelConfig
from casdyf.training import TrainConfig, evaluate, fit


def run(strategy, seed, steps, train, test):
    t0 = time.time()
    model, report, _ = fit(ModelConfig(strategy=strategy), train, TrainConfig(steps=steps, seed=seed),
                           test_pairs=test)
    scores = evaluate(model, test)
    return {"strategy": strategy, "seed": seed, "params": model.num_parameters(),
            "psnr": scores["psnr"], "hazy_psnr": scores["hazy_psnr"],
            "final_loss": report.losses[-1], "seconds": round(time.time() - t0, 1)}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--strategies", nargs="+", default=["dynamic", "split"])
    p.add_argument("--train-count", type=int, default=64)
    p.add_argument("--image-size", type=int, default=64)
    args = p.parse_args()
    warnings.simplefilter("ignore")
    train = synthetic_pairs(args.train_count, args.image_size, seed=0)
    test = synthetic_pairs(16, args.image_size, seed=1)
    for seed in args.seeds:
        for strategy in args.strategies:
            print(json.dumps(run(strategy, seed, args.steps, train, test)), flush=True)


if __name__ == "__main__":
    main()
