"""Cross-entropy fitting of Laguerre generators to interface test points."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diagram import ModelKind, Tessellation, facet_distances_batch
from .grid import GrainMap, interface_mask, interface_pairs, mask_coords
from .heuristics import fit_hq

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CEConfig:
    sample_size: int = 4000
    elite_size: int = 200
    test_points: int = 10
    site_std: float = 2.0
    weight_std: float | None = None  # None: 0.5 * mean(|w_Hq| + 1)
    stall_window: int = 10
    stall_rel: float = 1e-3
    max_iter: int = 200
    chunk: int = 250
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.elite_size < self.sample_size:
            raise ValueError("need 0 < elite_size < sample_size")
        if self.test_points < 1:
            raise ValueError("test_points must be >= 1")


@dataclass(frozen=True)
class TestPointSet:
    """Test points sampled from each nonempty interface; rows of (point, i, j), cells 1-based."""

    points: np.ndarray  # (T, 3)
    first: np.ndarray  # (T,)
    second: np.ndarray  # (T,)
    pairs: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.points)

    def of_pair(self, i: int, j: int) -> np.ndarray:
        sel = (self.first == i) & (self.second == j)
        return self.points[sel]


def sample_test_points(gmap: GrainMap, k: int = 10, seed: int = 0) -> TestPointSet:
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    pts, fi, se, pairs = [], [], [], []
    for i, j in interface_pairs(gmap):
        cand = mask_coords(interface_mask(gmap.labels, i, j))
        take = min(k, len(cand))
        sel = np.sort(rng.choice(len(cand), size=take, replace=False))
        pts.append(cand[sel].astype(float))
        fi += [i] * take
        se += [j] * take
        pairs.append((i, j))
    if not pts:
        return TestPointSet(np.zeros((0, 3)), np.zeros(0, int), np.zeros(0, int), ())
    return TestPointSet(np.concatenate(pts), np.array(fi), np.array(se), tuple(pairs))


def interface_discrepancy(tess: Tessellation, T: TestPointSet, return_empty: bool = False):
    """Sum of squared distances of test points to their fitted facets."""
    if not tess.kind.isotropic:
        raise ValueError("interface discrepancy needs a voronoi or laguerre tessellation")
    E, empty = _batch_E(T, tess.sites[None], tess.weights[None])
    return (float(E[0]), int(empty[0])) if return_empty else float(E[0])


def _batch_E(T: TestPointSet, sites: np.ndarray, weights: np.ndarray):
    if len(T) == 0:
        return np.zeros(len(sites)), np.zeros(len(sites), int)
    d, empty = facet_distances_batch(T.points, T.first - 1, T.second - 1, sites, weights)
    return d.sum(axis=1), empty.sum(axis=1)


@dataclass
class CETrace:
    iteration: list[int] = field(default_factory=list)
    best_E: list[float] = field(default_factory=list)
    mean_E: list[float] = field(default_factory=list)
    empty_facets: list[int] = field(default_factory=list)
    stop_reason: str = ""

    def add(self, it, best, mean, empty):
        self.iteration.append(int(it))
        self.best_E.append(float(best))
        self.mean_E.append(float(mean))
        self.empty_facets.append(int(empty))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "best_E", "mean_E", "empty_facets"])
        for row in zip(self.iteration, self.best_E, self.mean_E, self.empty_facets):
            w.writerow([row[0], repr(row[1]), repr(row[2]), row[3]])
        return buf.getvalue()


def fit_ce(gmap: GrainMap, config: CEConfig = CEConfig(), init: Tessellation | None = None,
           events: list | None = None) -> tuple[Tessellation, CETrace]:
    """Cross-entropy search over (sites, weights), started from the Hq Laguerre fit.

    Every iteration draws ``sample_size`` Gaussian vectors, keeps the
    ``elite_size`` best by interface discrepancy and moves the mean/std to the
    elite statistics. The best vector ever seen is returned.
    """
    if gmap.n < 2:
        raise ValueError("cross-entropy fitting needs at least two grains")
    cfg = config
    T = sample_test_points(gmap, cfg.test_points, cfg.seed)
    start = init if init is not None else fit_hq(gmap, ModelKind.LAGUERRE, events)
    if start.kind is not ModelKind.LAGUERRE:
        raise ValueError("cross-entropy fitting supports laguerre only")
    n = gmap.n
    mean = np.concatenate([start.sites.ravel(), start.weights])
    wstd = cfg.weight_std if cfg.weight_std is not None else 0.5 * float(np.mean(np.abs(start.weights) + 1))
    std = np.concatenate([np.full(3 * n, cfg.site_std), np.full(n, wstd)])
    rng = np.random.default_rng(cfg.seed)

    def evaluate(P):
        out_E = np.empty(len(P))
        out_e = np.empty(len(P), int)
        starts = list(range(0, len(P), cfg.chunk))

        def work(s):
            blk = P[s : s + cfg.chunk]
            E, e = _batch_E(T, blk[:, : 3 * n].reshape(-1, n, 3), blk[:, 3 * n :])
            out_E[s : s + cfg.chunk] = E
            out_e[s : s + cfg.chunk] = e

        if cfg.threads > 1:
            with ThreadPoolExecutor(cfg.threads) as pool:
                list(pool.map(work, starts))
        else:
            for s in starts:
                work(s)
        return out_E, out_e

    E0, e0 = evaluate(mean[None])
    best_vec, best_E, best_empty = mean.copy(), float(E0[0]), int(e0[0])
    trace = CETrace()
    trace.add(0, best_E, best_E, best_empty)
    for it in range(1, cfg.max_iter + 1):
        # all draws happen here, before any (possibly threaded) evaluation
        P = mean + std * rng.standard_normal((cfg.sample_size, mean.size))
        E, e = evaluate(P)
        order = np.argsort(E, kind="stable")
        elite = P[order[: cfg.elite_size]]
        if E[order[0]] < best_E:
            best_vec, best_E, best_empty = P[order[0]].copy(), float(E[order[0]]), int(e[order[0]])
        mean = elite.mean(axis=0)
        std = elite.std(axis=0)
        trace.add(it, best_E, float(E.mean()), best_empty)
        if np.all(std < 1e-12):
            trace.stop_reason = "std collapse"
            log.info("cross-entropy: std collapsed at iteration %d", it)
            break
        w = cfg.stall_window
        if it >= w and trace.best_E[-1 - w] - best_E <= cfg.stall_rel * abs(trace.best_E[-1 - w]):
            trace.stop_reason = f"relative improvement below {cfg.stall_rel:g} over {w} iterations"
            break
    else:
        trace.stop_reason = "max_iter"
    if best_empty and events is not None:
        events.append({"event": "empty_facet_fallback", "count": best_empty})
    sites = best_vec[: 3 * n].reshape(n, 3)
    w = best_vec[3 * n :]
    tess = Tessellation(sites, w - w.min(), np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), ModelKind.LAGUERRE, gmap.dims)
    return tess, trace
