"""F_c of GD fits of each model kind on elongated-grain maps, for several anisotropy ratios.

    python scripts/anisotropy_experiment.py --ratios 1 2 3 --seeds 0 1
"""

import argparse
import warnings

import numpy as np

from tessfit.diagram import assign
from tessfit.gdfit import GDConfig, fit_gd
from tessfit.heuristics import fit_hq
from tessfit.metrics import f_correct
from tessfit.synth import SynthSpec, anisotropize, generate

KINDS = ("laguerre", "dgbpd", "gbpd")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, nargs=3, default=[48, 48, 48])
    ap.add_argument("--n", type=int, default=24)
    ap.add_argument("--ratios", type=float, nargs="+", default=[1.0, 2.0, 3.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--epochs", type=int, default=25)
    args = ap.parse_args()
    warnings.simplefilter("ignore")
    print("ratio seed cells " + " ".join(f"hq_{k:<8} gd_{k:<8}" for k in KINDS))
    for ratio in args.ratios:
        for seed in args.seeds:
            spec = anisotropize(SynthSpec(dims=tuple(args.dims), n=args.n, seed=seed), ratio)
            _, g = generate(spec)
            row = []
            for kind in KINDS:
                hq = f_correct(g, assign(fit_hq(g, kind)))
                gd = f_correct(g, assign(fit_gd(g, kind, GDConfig(max_epochs=args.epochs, seed=seed))[0]))
                row += [hq, gd]
            print(f"{ratio:5.1f} {seed:4d} {g.n:5d} " + " ".join(f"{v:11.4f}" for v in row), flush=True)


if __name__ == "__main__":
    main()
