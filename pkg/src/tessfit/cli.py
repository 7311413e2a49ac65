"""Command-line front end: ``tessfit {synth,fit,eval,slice}``.

Exit codes: 0 success, 2 usage or unsupported method/model pair, 3 data
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cefit import CEConfig, fit_ce
from .diagram import DiagramError, LabelField, ModelKind, Tessellation, assign
from .gdfit import GDConfig, fit_gd
from .grid import GrainMap, GrainMapError, load_grain_map, save_grain_map
from .heuristics import fit_h0, fit_hq
from .lpfit import LPError, VolumeBounds, build_coreset, fit_lp_dual, fit_lp_svm
from .metrics import MetricError, MetricTable, evaluate
from .neperfit import NeperConfig, fit_neper
from .synth import SynthError, SynthSpec, anisotropize, generate

log = logging.getLogger("tessfit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

METHODS = ("h0", "hq", "lp", "ce", "gd", "neper")
MODELS = tuple(k.value for k in ModelKind)

# which output model each method can guarantee for voxelised input
CAPABILITIES = {
    "h0": {"voronoi", "laguerre", "dgbpd", "gbpd"},
    "hq": {"laguerre", "dgbpd", "gbpd"},
    "lp": {"laguerre", "dgbpd", "gbpd"},
    "ce": {"laguerre"},
    "gd": {"voronoi", "laguerre", "dgbpd", "gbpd"},
    "neper": {"voronoi", "laguerre"},
}


class UsageError(Exception):
    pass


def supported(method: str, model: str) -> bool:
    return model in CAPABILITIES.get(method, set())


@dataclass
class FitReport:
    method: str
    model: str
    seed: int
    config: dict
    events: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    trace: str | None = None
    tessellation: str = ""
    map: str = ""
    wall_time: float = 0.0

    def dumps(self) -> str:
        return json.dumps(asdict(self), indent=1, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec(
        dims=tuple(args.dims),
        kind=args.kind,
        n=None if args.intensity is not None else args.n,
        intensity=args.intensity,
        seed=args.seed,
    )
    if args.anisotropy is not None:
        spec = anisotropize(spec, args.anisotropy)
    tess, gmap = generate(spec)
    out = Path(args.out)
    raw, side = save_grain_map(gmap, out)
    tpath = tess.save(out.with_suffix(".tess.json"))
    print(f"wrote {raw}, {side}, {tpath} ({gmap.n} grains)")
    return EXIT_OK


def _fit(args, gmap: GrainMap, events: list):
    """Dispatch to the fitting module; returns (tessellation, trace csv or None, diagnostics)."""
    method, kind = args.method, ModelKind.parse(args.model)
    if method == "h0":
        return fit_h0(gmap, kind, events), None, {}
    if method == "hq":
        return fit_hq(gmap, kind, events), None, {}
    if method == "lp":
        if args.lp_variant == "svm":
            cs = build_coreset(gmap, args.coreset_stride, args.delta)
            tess, res = fit_lp_svm(gmap, cs, kind, events=events)
            diag = {"objective": res.objective, "coreset_size": len(cs), "floored": res.floored}
            return tess, None, diag
        cs = build_coreset(gmap, args.coreset_stride, args.delta) if args.coreset else None
        vol = gmap.volumes()[1:]
        bounds = VolumeBounds.around(vol, args.epsilon)
        tess, cert = fit_lp_dual(gmap, bounds, kind, coreset=cs, events=events)
        fld = assign(tess, gmap.dims, args.threads)
        sizes = np.bincount(fld.labels.ravel().astype(np.int64), minlength=gmap.n + 1)[1:]
        diag = cert.summary()
        if cs is None:
            diag["discretised_volumes_within_bounds"] = bool(
                np.all(sizes >= bounds.lower) and np.all(sizes <= bounds.upper)
            )
        return tess, None, diag
    if method == "ce":
        cfg = CEConfig(sample_size=args.ce_samples, elite_size=args.ce_elite, test_points=args.ce_test_points,
                       max_iter=args.ce_max_iter, threads=args.threads or 1, seed=args.seed)
        tess, trace = fit_ce(gmap, cfg, events=events)
        return tess, trace.to_csv(), {"stop_reason": trace.stop_reason, "best_E": trace.best_E[-1]}
    if method == "gd":
        tau = args.tau if args.tau is not None else "auto"
        cfg = GDConfig(max_epochs=args.epochs, tau=tau, lr_sites=args.lr_sites, lr_weights=args.lr_weights,
                       lr_factors=args.lr_factors, seed=args.seed)
        tess, trace = fit_gd(gmap, kind, cfg, events=events)
        return tess, trace.to_csv(), {"tau": trace.tau, "best_objective": max(trace.best)}
    if method == "neper":
        cfg = NeperConfig(stop_abs=args.stop_abs, stop_window_mult=args.stop_window_mult, threads=args.threads)
        tess, trace = fit_neper(gmap, kind, cfg, events=events)
        return tess, trace.to_csv(), {"stop_reason": trace.stop_reason, "best_objective": trace.best[-1],
                                      "evaluations": len(trace.evaluation)}
    raise UsageError(f"unknown method {method}")


def cmd_fit(args) -> int:
    if not supported(args.method, args.model):
        ok = sorted(CAPABILITIES.get(args.method, ()))
        raise UsageError(
            f"method {args.method!r} cannot produce model {args.model!r} from voxel data "
            f"(capability matrix: {args.method} supports {', '.join(ok)})"
        )
    gmap = load_grain_map(args.map)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    events: list = []
    t0 = time.perf_counter()
    tess, trace, diag = _fit(args, gmap, events)
    wall = time.perf_counter() - t0
    tpath = tess.save(out.with_suffix(".tess.json"))
    trace_path = None
    if trace is not None:
        trace_path = out.with_suffix(".trace.csv")
        trace_path.write_text(trace)
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "map", "verbose")}
    report = FitReport(args.method, args.model, args.seed, config, events, diag,
                       str(trace_path) if trace_path else None, str(tpath), str(args.map), wall)
    out.with_suffix(".report.json").write_text(report.dumps())
    print(f"wrote {tpath} ({args.method}/{args.model}, {wall:.2f} s)")
    return EXIT_OK


def _load_field(path: str, dims, threads=None) -> tuple[LabelField, str, str]:
    """Tessellation JSON (discretised here) or a label map; returns field, method, model."""
    p = Path(path)
    if p.suffix == ".json":
        data = json.loads(p.read_text())
        if "generators" in data:
            tess = Tessellation.from_dict(data)
            if tuple(tess.dims) != tuple(dims):
                raise MetricError(f"{p}: tessellation dims {tess.dims} differ from map dims {tuple(dims)}")
            method = p.name.split(".")[0]
            rep = p.with_name(p.name.replace(".tess.json", ".report.json"))
            if rep != p and rep.exists():
                method = json.loads(rep.read_text()).get("method", method)
            return assign(tess, dims, threads), method, tess.kind.value
    g = load_grain_map(p)
    if g.dims != tuple(dims):
        raise MetricError(f"{p}: field dims {g.dims} differ from map dims {tuple(dims)}")
    return LabelField(g.labels, g.n), "labels", "field"


def cmd_eval(args) -> int:
    gmap = load_grain_map(args.map)
    dataset = args.dataset or Path(args.map).with_suffix("").name
    rows = []
    for path in args.fits:
        fld, method, model = _load_field(path, gmap.dims, args.threads)
        rows.append((method, model, str(path), evaluate(gmap, fld)))
    table = MetricTable()
    for method, model, _, vals in sorted(rows, key=lambda r: (r[0], r[1], r[2])):
        table.add(dataset, method, model, vals)
    csv_path, txt_path = table.save(Path(args.out))
    sys.stdout.write(table.to_text())
    print(f"wrote {csv_path}, {txt_path}")
    return EXIT_OK


def label_color(labels: np.ndarray) -> np.ndarray:
    """Deterministic RGB per label from an integer hash; label 0 is black."""
    lab = labels.astype(np.uint64)
    h = (lab * np.uint64(2654435761)) & np.uint64(0xFFFFFFFF)
    rgb = np.stack([(h >> np.uint64(s)) & np.uint64(255) for s in (0, 8, 16)], axis=-1).astype(np.uint8)
    rgb = rgb | np.uint8(0x40)  # keep labelled pixels away from black
    rgb[labels == 0] = 0
    return rgb


def slice_image(labels: np.ndarray, axis: int, index: int) -> np.ndarray:
    """2D slice with rows along the last remaining axis and columns along the first."""
    if not 0 <= index < labels.shape[axis]:
        raise IndexError(f"slice index {index} outside 0..{labels.shape[axis] - 1}")
    return np.take(labels, index, axis=axis).T


def write_pnm(path, img: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img.shape[:2]
    if img.ndim == 2:
        head = f"P5\n{w} {h}\n255\n".encode()
    else:
        head = f"P6\n{w} {h}\n255\n".encode()
    path.write_bytes(head + np.ascontiguousarray(img, dtype=np.uint8).tobytes())
    return path


def cmd_slice(args) -> int:
    p = Path(args.input)
    if p.suffix == ".json" and "generators" in json.loads(p.read_text()):
        tess = Tessellation.load(p)
        labels = assign(tess, threads=args.threads).labels
    else:
        labels = load_grain_map(p).labels
    axis = "xyz".index(args.axis)
    try:
        sl = slice_image(labels, axis, args.index)
    except IndexError as exc:
        raise UsageError(str(exc)) from exc
    if args.gray:
        top = max(int(sl.max()), 1)
        img = np.where(sl > 0, 55 + (sl.astype(np.int64) * 200) // top, 0).astype(np.uint8)
    else:
        img = label_color(sl)
    out = write_pnm(args.out, img)
    print(f"wrote {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tessfit", description="Fit tessellation models to voxel grain maps.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic grain map and its generators")
    sp.add_argument("--dims", type=int, nargs=3, default=[32, 32, 32])
    sp.add_argument("--kind", choices=MODELS, default="laguerre")
    sp.add_argument("--n", type=int, default=10)
    sp.add_argument("--intensity", type=float, default=None, help="Poisson intensity per voxel (overrides --n)")
    sp.add_argument("--anisotropy", type=float, default=None, help="GBPD with first half-axis stretched by this ratio")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output prefix (writes .raw, .json, .tess.json)")
    sp.set_defaults(func=cmd_synth)

    fp = sub.add_parser("fit", help="fit a tessellation to a grain map")
    fp.add_argument("map")
    fp.add_argument("--method", choices=METHODS, required=True)
    fp.add_argument("--model", choices=MODELS, required=True)
    fp.add_argument("--out", required=True, help="output prefix (writes .tess.json, .report.json, .trace.csv)")
    fp.add_argument("--seed", type=int, default=0)
    fp.add_argument("--threads", type=int, default=None)
    fp.add_argument("--epsilon", type=float, default=2.0)
    fp.add_argument("--lp-variant", choices=("dual", "svm"), default="dual")
    fp.add_argument("--coreset", action="store_true", help="restrict the assignment LP to a coreset")
    fp.add_argument("--coreset-stride", type=int, default=10)
    fp.add_argument("--delta", type=float, default=20.0)
    fp.add_argument("--ce-samples", type=int, default=4000)
    fp.add_argument("--ce-elite", type=int, default=200)
    fp.add_argument("--ce-test-points", type=int, default=10)
    fp.add_argument("--ce-max-iter", type=int, default=200)
    fp.add_argument("--epochs", type=int, default=25)
    fp.add_argument("--tau", type=float, default=None, help="softmax temperature (default: from GT boundaries)")
    fp.add_argument("--lr-sites", type=float, default=0.1)
    fp.add_argument("--lr-weights", type=float, default=0.1)
    fp.add_argument("--lr-factors", type=float, default=0.01)
    fp.add_argument("--stop-abs", type=float, default=1e-3)
    fp.add_argument("--stop-window-mult", type=int, default=40)
    fp.set_defaults(func=cmd_fit)

    ep = sub.add_parser("eval", help="compare tessellations or label fields with a grain map")
    ep.add_argument("map")
    ep.add_argument("fits", nargs="+", help="tessellation JSON files or label maps")
    ep.add_argument("--out", required=True, help="output prefix (writes .csv and .txt)")
    ep.add_argument("--dataset", default=None)
    ep.add_argument("--threads", type=int, default=None)
    ep.set_defaults(func=cmd_eval)

    lp = sub.add_parser("slice", help="render one slice as PPM (or PGM with --gray)")
    lp.add_argument("input", help="grain map or tessellation JSON")
    lp.add_argument("--axis", choices=("x", "y", "z"), default="z")
    lp.add_argument("--index", type=int, required=True)
    lp.add_argument("--out", required=True)
    lp.add_argument("--gray", action="store_true")
    lp.add_argument("--threads", type=int, default=None)
    lp.set_defaults(func=cmd_slice)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GrainMapError, MetricError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (LPError, DiagramError, SynthError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
