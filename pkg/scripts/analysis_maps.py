"""Spectra of the dilated base kernels, ERF maps and the cost table.

Writes CSV spectra and PGM heat maps into --out, prints ERF radii and the
parameter / FLOP table for a few configurations.
"""
import argparse
import warnings
from pathlib import Path

from casdyf import analysis
from casdyf.data import synthetic_pairs
from casdyf.network import CasDyFNet, ModelConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/analysis")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args()
    warnings.simplefilter("ignore")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    for base, kernel in analysis.BASE_KERNELS.items():
        for d in (1, 3, 5):
            rep = analysis.kernel_spectrum(kernel, d, args.size, base)
            analysis.write_spectrum_csv(out / f"spectrum_{base}_d{d}.csv", rep)
        for mode in ("serial", "parallel"):
            rep = analysis.composite_spectrum(kernel, [1, 3, 5], mode, args.size, base)
            analysis.write_spectrum_csv(out / f"spectrum_{base}_{mode}135.csv", rep)
            print(f"{base:<10} {mode:<9} distinct levels {rep.distinct_levels()}")

    img = synthetic_pairs(1, 64, seed=3)[0].hazy
    for seed in range(args.seeds):
        radii = []
        for dil in ((1, 3, 5), (1, 1, 1)):
            res = analysis.erf_map(CasDyFNet(ModelConfig(dilations=dil), seed=seed), img, (0, 32, 32))
            analysis.write_erf_pgm(out / f"erf_seed{seed}_d{''.join(map(str, dil))}.pgm", res)
            radii.append(res.effective_radius())
        print(f"seed {seed}: ERF radius {{1,3,5}} {radii[0]}  {{1,1,1}} {radii[1]}")

    configs = {
        "desk": ModelConfig(),
        "split": ModelConfig(strategy="split"),
        "deeper": ModelConfig(depths=(2, 2, 4, 2, 2)),
        "wide": ModelConfig(channels=64, depths=(2, 2, 4, 2, 2)),
    }
    for name, cfg in configs.items():
        rep = analysis.count_params_flops(cfg, 256, 256)
        print(f"{name:<8} params {rep.total_params / 1e6:7.3f}M  FLOPs {rep.total_flops / 1e9:8.2f}G at 256x256")
    ref = analysis.PUBLISHED_REFERENCE
    print(f"calibration reference: {ref['params_m']}M / {ref['flops_g']}G (not asserted)")


if __name__ == "__main__":
    main()
