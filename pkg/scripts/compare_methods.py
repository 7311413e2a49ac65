"""Fit every supported method/model pair to one synthetic map and print the metric table.

    python scripts/compare_methods.py --dims 32 32 32 --n 10 --seed 0 --out results/compare
"""

import argparse
import time
import warnings

from tessfit.cefit import CEConfig, fit_ce
from tessfit.cli import CAPABILITIES
from tessfit.diagram import assign
from tessfit.gdfit import GDConfig, fit_gd
from tessfit.heuristics import fit_h0, fit_hq
from tessfit.lpfit import fit_lp_dual
from tessfit.metrics import MetricTable, evaluate
from tessfit.neperfit import fit_neper
from tessfit.synth import SynthSpec, generate


def run(method, model, gmap, args):
    if method == "h0":
        return fit_h0(gmap, model)
    if method == "hq":
        return fit_hq(gmap, model)
    if method == "lp":
        return fit_lp_dual(gmap, kind=model)[0]
    if method == "ce":
        return fit_ce(gmap, CEConfig(sample_size=args.ce_samples, elite_size=args.ce_samples // 20, seed=args.seed))[0]
    if method == "gd":
        return fit_gd(gmap, model, GDConfig(seed=args.seed))[0]
    return fit_neper(gmap, model)[0]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, nargs=3, default=[32, 32, 32])
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--kind", default="laguerre")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ce-samples", type=int, default=1000)
    ap.add_argument("--skip", nargs="*", default=[], help="methods to leave out, e.g. ce")
    ap.add_argument("--out", default="results/compare")
    args = ap.parse_args()
    _, gmap = generate(SynthSpec(dims=tuple(args.dims), n=args.n, kind=args.kind, seed=args.seed))
    table = MetricTable()
    warnings.simplefilter("ignore")
    for method, models in CAPABILITIES.items():
        if method in args.skip:
            continue
        for model in sorted(models):
            t0 = time.perf_counter()
            tess = run(method, model, gmap, args)
            table.add(f"synth-{args.kind}", method, model, evaluate(gmap, assign(tess)))
            print(f"{method:>5} {model:<8} F_c={table.rows[-1]['F_c']:.4f} ({time.perf_counter() - t0:.1f} s)", flush=True)
    table.save(args.out)
    print(table.to_text())


if __name__ == "__main__":
    main()
