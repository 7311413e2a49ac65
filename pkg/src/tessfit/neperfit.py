"""Derivative-free fitting of Voronoi/Laguerre generators to grain boundaries.

The objective compares the boundary voxels of every grain with the fitted
cell of the same index; it is minimised over (sites, weights) by a Subplex
style search (Nelder-Mead on small coordinate subspaces).
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .diagram import LabelField, ModelKind, Tessellation, assign, assign_coords
from .grid import GrainMap, all_boundary_mask, all_moments, boundary_mask, grid_coords
from .heuristics import fit_h0, fit_hq

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NeperConfig:
    stop_abs: float = 1e-3
    stop_window_mult: int = 40  # window = mult * n evaluations
    site_step: float = 1.0
    weight_step: float | None = None  # None: 0.1 * mean(|w|) + 1
    max_evals: int = 20000
    threads: int | None = None

    def __post_init__(self):
        if self.stop_abs <= 0:
            raise ValueError("stop threshold must be positive")
        if self.stop_window_mult < 1:
            raise ValueError("stop window multiplier must be >= 1")


class BoundaryData:
    """GT boundary voxels per grain and the normalisation constants of the objective."""

    def __init__(self, gmap: GrainMap):
        self.gmap = gmap
        n = gmap.n
        self.coords = []
        for i in range(1, n + 1):
            m = boundary_mask(gmap.labels, i)
            self.coords.append(np.argwhere(m))
        self.total = int(sum(len(c) for c in self.coords))
        vol, _, _ = all_moments(gmap.labels, n)
        self.mean_diameter = float(np.mean(np.cbrt(6.0 * vol / np.pi)))


def _cell_boundaries(field_labels: np.ndarray) -> dict[int, np.ndarray]:
    """Per label, the voxels that have a face neighbour of another label (or the window edge)."""
    mask = all_boundary_mask(field_labels)
    pts = np.argwhere(mask)
    lab = field_labels[mask].astype(np.int64)
    order = np.argsort(lab, kind="stable")
    pts, lab = pts[order], lab[order]
    cuts = np.flatnonzero(np.diff(lab)) + 1
    out = {}
    for block, lb in zip(np.split(pts, cuts), np.split(lab, cuts)):
        if len(lb):
            out[int(lb[0])] = block
    return out


def _deltas_sq(bd: BoundaryData, tess: Tessellation, labels: np.ndarray) -> np.ndarray:
    """Squared delta_i for all cells, given the assigned field labels."""
    n = bd.gmap.n
    out = np.zeros(n)
    fb = None
    for i in range(1, n + 1):
        pts = bd.coords[i - 1]
        if len(pts) == 0:
            continue
        miss = labels[tuple(pts.T)] != i
        if not miss.any():
            continue
        q = pts[miss].astype(float)
        if fb is None:
            fb = _cell_boundaries(labels)
        target = fb.get(i)
        if target is None:
            # empty cell: distance to its site
            out[i - 1] = float(np.sum((q - tess.sites[i - 1]) ** 2))
        else:
            d, _ = cKDTree(target).query(q)
            out[i - 1] = float(np.sum(d * d))
    return out


def cell_delta(gmap: GrainMap, tess: Tessellation, i: int, field: LabelField | None = None) -> float:
    if field is None:
        field = assign(tess, gmap.dims)
    bd = BoundaryData(gmap)
    return float(np.sqrt(_deltas_sq(bd, tess, field.labels)[i - 1]))


def objective_neper(gmap: GrainMap, tess: Tessellation, field: LabelField | None = None,
                    data: BoundaryData | None = None) -> float:
    bd = data or BoundaryData(gmap)
    if field is None:
        field = assign(tess, gmap.dims)
    dsq = _deltas_sq(bd, tess, field.labels)
    return float(2.0 / (bd.mean_diameter * bd.total) * np.sqrt(dsq.sum()))


# -- Subplex-style optimiser -----------------------------------------------------


class _Stop(Exception):
    pass


@dataclass
class NeperTrace:
    evaluation: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    best: list[float] = field(default_factory=list)
    stop_reason: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["evaluation", "objective", "best_objective"])
        for row in zip(self.evaluation, self.objective, self.best):
            w.writerow([row[0], repr(row[1]), repr(row[2])])
        return buf.getvalue()


class _Counter:
    """Objective wrapper: records the trace, tracks the best point, applies the stopping rule."""

    def __init__(self, fun, window: int, stop_abs: float, max_evals: int):
        self.fun = fun
        self.window = window
        self.stop_abs = stop_abs
        self.max_evals = max_evals
        self.trace = NeperTrace()
        self.best_x = None
        self.best_f = np.inf

    def __call__(self, x):
        if len(self.trace.evaluation) >= self.max_evals:
            self.trace.stop_reason = "max_evals"
            raise _Stop
        f = float(self.fun(x))
        if f < self.best_f:
            self.best_f, self.best_x = f, np.array(x, float)
        t = self.trace
        t.evaluation.append(len(t.evaluation) + 1)
        t.objective.append(f)
        t.best.append(self.best_f)
        k = len(t.best)
        if k > self.window and t.best[k - 1 - self.window] - t.best[-1] < self.stop_abs:
            t.stop_reason = f"improvement over {self.window} evaluations below {self.stop_abs:g}"
            raise _Stop
        return f


def _nelder_mead(fun, x0, steps, f0, max_evals: int, psi: float = 0.25):
    """Nelder-Mead on a subspace; stops once the simplex shrank by ``psi`` or after max_evals."""
    k = len(x0)
    simplex = [np.array(x0, float)]
    fs = [f0]
    for a in range(k):
        v = np.array(x0, float)
        v[a] += steps[a]
        simplex.append(v)
        fs.append(fun(v))
    simplex = np.array(simplex)
    fs = np.array(fs)
    size0 = np.abs(simplex[1:] - simplex[0]).sum()
    used = k
    while used < max_evals:
        order = np.argsort(fs, kind="stable")
        simplex, fs = simplex[order], fs[order]
        if np.abs(simplex[1:] - simplex[0]).sum() <= psi * size0:
            break
        cen = simplex[:-1].mean(axis=0)
        xr = cen + (cen - simplex[-1])
        fr = fun(xr)
        used += 1
        if fr < fs[0]:
            xe = cen + 2.0 * (cen - simplex[-1])
            fe = fun(xe)
            used += 1
            simplex[-1], fs[-1] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < fs[-2]:
            simplex[-1], fs[-1] = xr, fr
        else:
            if fr < fs[-1]:
                xc = cen + 0.5 * (xr - cen)
            else:
                xc = cen + 0.5 * (simplex[-1] - cen)
            fc = fun(xc)
            used += 1
            if fc < min(fr, fs[-1]):
                simplex[-1], fs[-1] = xc, fc
            else:
                for v in range(1, k + 1):
                    simplex[v] = simplex[0] + 0.5 * (simplex[v] - simplex[0])
                    fs[v] = fun(simplex[v])
                used += k
    b = int(np.argmin(fs))
    return simplex[b], fs[b]


def _partition(order: np.ndarray, nsmin: int = 2, nsmax: int = 5) -> list[np.ndarray]:
    """Consecutive blocks of at most nsmax coordinates; a short tail is merged backwards."""
    blocks = [order[s : s + nsmax] for s in range(0, len(order), nsmax)]
    if len(blocks) > 1 and len(blocks[-1]) < nsmin:
        tail = blocks.pop()
        blocks[-1] = np.concatenate([blocks[-1], tail])
    return blocks


def subplex(fun, x0, steps, max_evals: int = 20000, window: int = 100, stop_abs: float = 1e-3):
    """Minimise ``fun`` from x0; returns (best x, best f, trace).

    Each cycle orders coordinates by how far they moved in the previous cycle,
    runs Nelder-Mead on blocks of 2-5 coordinates, then rescales the steps by
    the overall progress (bounded to [0.1, 10]).
    """
    counter = _Counter(fun, window, stop_abs, max_evals)
    x = np.array(x0, float)
    steps = np.array(steps, float)
    try:
        fx = counter(x)
        dx = steps.copy()
        while True:
            order = np.argsort(-np.abs(dx), kind="stable")
            x_prev = x.copy()
            for blk in _partition(order):
                def sub(z, blk=blk):
                    xt = x.copy()
                    xt[blk] = z
                    return counter(xt)

                sgn = np.where(dx[blk] < 0, -1.0, 1.0)
                zb, fb = _nelder_mead(sub, x[blk], sgn * np.abs(steps[blk]), fx, max_evals=50 * len(blk))
                if fb <= fx:
                    x[blk] = zb
                    fx = fb
            dx = x - x_prev
            moved = np.abs(dx).sum()
            ratio = moved / np.abs(steps).sum() if moved > 0 else 0.1
            steps = np.abs(steps) * np.clip(ratio, 0.1, 10.0)
            steps = np.where(dx != 0, np.sign(dx), 1.0) * steps
            if np.all(np.abs(steps) < 1e-12):
                counter.trace.stop_reason = "step collapse"
                break
    except _Stop:
        pass
    return counter.best_x, counter.best_f, counter.trace


def fit_neper(gmap: GrainMap, kind=ModelKind.LAGUERRE, config: NeperConfig = NeperConfig(),
              init: Tessellation | None = None, events: list | None = None) -> tuple[Tessellation, NeperTrace]:
    kind = ModelKind.parse(kind)
    if not kind.isotropic:
        raise ValueError("boundary-distance fitting supports voronoi and laguerre only")
    cfg = config
    if init is None:
        init = fit_h0(gmap, kind, events) if kind is ModelKind.VORONOI else fit_hq(gmap, kind, events)
    n = gmap.n
    bd = BoundaryData(gmap)
    coords = grid_coords(gmap.dims)
    eye = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    with_w = kind is ModelKind.LAGUERRE

    def unpack(v):
        sites = v[: 3 * n].reshape(n, 3)
        w = v[3 * n :] if with_w else np.zeros(n)
        return sites, w

    def fun(v):
        sites, w = unpack(v)
        tess = Tessellation(sites, w - w.min() if with_w else w, eye, kind, gmap.dims)
        lab = assign_coords(tess, coords, cfg.threads).reshape(gmap.dims, order="F")
        dsq = _deltas_sq(bd, tess, lab)
        return 2.0 / (bd.mean_diameter * bd.total) * np.sqrt(dsq.sum())

    x0 = np.concatenate([init.sites.ravel(), init.weights]) if with_w else init.sites.ravel().copy()
    wstep = cfg.weight_step if cfg.weight_step is not None else 0.1 * float(np.mean(np.abs(init.weights))) + 1.0
    steps = np.concatenate([np.full(3 * n, cfg.site_step), np.full(n if with_w else 0, wstep)])
    xb, fb, trace = subplex(fun, x0, steps, cfg.max_evals, cfg.stop_window_mult * n, cfg.stop_abs)
    sites, w = unpack(xb)
    if with_w:
        w = w - w.min()
    return Tessellation(sites, w, eye, kind, gmap.dims), trace
