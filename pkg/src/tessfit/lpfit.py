"""Linear-programming fits.

``fit_lp_dual``: volume-bounded assignment of voxels to fixed sites/matrices;
the weights are the duals of the volume rows.

``fit_lp_svm``: margin LP over the lifted 10-vector of every generator
(constant, linear and quadratic coefficients), optimising sites, matrices and
weights together.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.optimize import linprog

from .diagram import EIG_FLOOR, ModelKind, Tessellation, distance_matrix
from .grid import GrainMap, all_moments, grid_coords
from .heuristics import grain_matrices, hq_weights

log = logging.getLogger(__name__)


class LPError(RuntimeError):
    pass


@dataclass(frozen=True)
class VolumeBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, float)
        hi = np.asarray(self.upper, float)
        if lo.shape != hi.shape or np.any(lo < 0) or np.any(lo > hi):
            raise ValueError("volume bounds need 0 <= lower <= upper, same shape")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def around(cls, volumes, epsilon: float = 2.0) -> "VolumeBounds":
        v = np.asarray(volumes, float)
        return cls(np.maximum(v - epsilon, 0.0), v + epsilon)

    @classmethod
    def relaxed(cls, n: int) -> "VolumeBounds":
        return cls(np.zeros(n), np.full(n, np.inf))

    def feasible_for(self, m: float) -> bool:
        return self.lower.sum() <= m + 1e-9 and self.upper.sum() >= m - 1e-9


@dataclass(frozen=True)
class Coreset:
    """Sampled voxels: the non-interior part used by both LPs and the sampled interior."""

    coords: np.ndarray  # (k, 3) int
    labels: np.ndarray  # (k,) 1-based grain of each voxel
    stride: int
    delta: float
    interior_coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), int))
    interior_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def __len__(self) -> int:
        return len(self.coords)


def _interior_mask(gmap: GrainMap, delta: float) -> np.ndarray:
    """Voxels at Euclidean distance >= delta from every voxel of W outside their grain."""
    out = np.zeros(gmap.dims, dtype=bool)
    if delta <= 0:
        return out
    labels = gmap.labels
    for i in range(1, gmap.n + 1):
        mask = labels == i
        if mask.all():
            out |= mask
            continue
        sl = ndimage.find_objects(mask.astype(np.int8))[0]
        # pad the box by delta so the distance transform sees outside voxels
        pad = int(np.ceil(delta)) + 1
        box = tuple(slice(max(s.start - pad, 0), min(s.stop + pad, d)) for s, d in zip(sl, gmap.dims))
        sub = mask[box]
        if sub.all():
            dist = ndimage.distance_transform_edt(mask)
            out |= mask & (dist >= delta)
            continue
        dist = ndimage.distance_transform_edt(sub)
        out[box] |= sub & (dist >= delta)
    return out


def build_coreset(gmap: GrainMap, stride: int = 10, delta: float = 20.0) -> Coreset:
    if stride < 1 or delta < 0:
        raise ValueError("need stride >= 1 and delta >= 0")
    labels = gmap.labels
    c = grid_coords(gmap.dims).astype(int)
    flat = labels.ravel(order="F").astype(np.int64)
    on_lattice = np.all(c % stride == 0, axis=1) & (flat > 0)
    interior = _interior_mask(gmap, delta).ravel(order="F")
    keep = on_lattice & ~interior
    inner = on_lattice & interior
    counts = np.bincount(flat[keep], minlength=gmap.n + 1)[1:]
    empty = (np.flatnonzero(counts == 0) + 1).tolist()
    if empty:
        raise LPError(f"empty coreset for grains {empty} (stride={stride}, delta={delta})")
    return Coreset(c[keep], flat[keep], stride, delta, c[inner], flat[inner])


# -- volume-bounded assignment LP ------------------------------------------


@dataclass
class LPCertificate:
    objective: float
    dual_objective: float
    duality_gap: float
    cs_residual: float
    loads: np.ndarray
    bounds: VolumeBounds
    integral: bool
    rounds: int
    n_arcs: int
    assignment: np.ndarray  # 1-based cell per fitting voxel
    fit_coords: np.ndarray

    @property
    def certified(self) -> bool:
        return self.duality_gap < 1e-6 * max(1.0, abs(self.objective)) and self.cs_residual < 1e-6

    def summary(self) -> dict:
        return {
            "objective": self.objective,
            "dual_objective": self.dual_objective,
            "duality_gap": self.duality_gap,
            "cs_residual": self.cs_residual,
            "integral": self.integral,
            "column_generation_rounds": self.rounds,
            "arcs": self.n_arcs,
            "bounds_satisfied": bool(
                np.all(self.loads >= self.bounds.lower - 1e-9) and np.all(self.loads <= self.bounds.upper + 1e-9)
            ),
        }


def dual_to_weights(duals) -> np.ndarray:
    """Shift duals so the smallest weight is zero (assignment is shift invariant)."""
    d = np.asarray(duals, float)
    return d - d.min()


def _dual_value(cost_min_sum: float, w: np.ndarray, b: VolumeBounds) -> float:
    # max over (p <= 0, q <= 0, p - q = w) of upper.p - lower.q
    hi = np.where(np.isfinite(b.upper), b.upper, 0.0)
    g = np.where(w >= 0, b.lower * w, np.where(np.isfinite(b.upper), hi * w, -np.inf))
    return cost_min_sum + float(g.sum())


def _potentials(cost: np.ndarray, assign0: np.ndarray, loads: np.ndarray, b: VolumeBounds, tol: float):
    """Exact duals for an integral assignment by shortest paths on difference constraints.

    cost is (n, m); assign0 is the 0-based cell of every voxel. Returns w or None
    if the constraint graph has a negative cycle (assignment not optimal).
    """
    n = cost.shape[0]
    # C[i, k] = min over voxels j of cell i of cost[k, j] - cost[i, j]; edge i -> k
    C = np.full((n + 1, n + 1), np.inf)
    for i in range(n):
        J = np.flatnonzero(assign0 == i)
        if J.size:
            C[i, :n] = (cost[:, J] - cost[i, J]).min(axis=1)
    np.fill_diagonal(C, np.inf)
    z = n  # node for the constant 0
    at_lo = loads <= b.lower + tol
    at_hi = loads >= b.upper - tol
    for i in range(n):
        if not at_hi[i]:  # w_i >= 0 unless the upper bound is active
            C[i, z] = 0.0
        if not at_lo[i]:  # w_i <= 0 unless the lower bound is active
            C[z, i] = 0.0
    # largest solution <= 0 and smallest solution >= 0; their midpoint keeps
    # constraints slack where possible, so the decoded diagram avoids ties
    hi = _relax(C)
    lo = None if hi is None else -_relax(C.T)
    if hi is None or lo is None:
        return None
    mid = 0.5 * (hi + lo)
    return mid[:n] - mid[z]


def _relax(C: np.ndarray) -> np.ndarray | None:
    """Bellman-Ford from a virtual source joined to every node by zero-length edges."""
    k = len(C)
    d = np.zeros(k)
    for _ in range(k + 1):
        nd = np.minimum(d, (d[:, None] + C).min(axis=0))
        if np.array_equal(nd, d):
            return d
        d = nd
    return None


def _restricted_lp(c: np.ndarray, lower: np.ndarray, upper: np.ndarray, init: np.ndarray | None,
                   k0: int, max_rounds: int):
    """Column generation on the arc set of a (n, k) transportation problem.

    Bounds are elastic (penalised slacks) so every restricted problem is
    feasible. Returns 0-based assignment, bound duals w, max slack, rounds, arcs.
    """
    n, m = c.shape
    k0 = min(k0, n)
    if k0 < n:
        ii = np.argpartition(c, k0 - 1, axis=0)[:k0].ravel()
    else:
        ii = np.repeat(np.arange(n)[:, None], m, axis=1).ravel()
    jj = np.tile(np.arange(m), k0)
    if init is not None:
        ii = np.concatenate([ii, init])
        jj = np.concatenate([jj, np.arange(m)])
    arc_code = np.unique(ii.astype(np.int64) * m + jj)
    penalty = 1e3 * (c.max() - c.min() + 1.0) * max(n, 1)
    hi_fin = np.isfinite(upper)
    nh = int(hi_fin.sum())
    eye = sparse.identity(n, format="csr")
    zero = sparse.csr_matrix((n, n))
    rounds = 0
    while True:
        rounds += 1
        ai = arc_code // m
        aj = arc_code % m
        na = len(arc_code)
        # variables: arcs, lower-bound slacks, upper-bound slacks
        obj = np.concatenate([c[ai, aj], np.full(2 * n, penalty)])
        A_eq = sparse.csr_matrix((np.ones(na), (aj, np.arange(na))), shape=(m, na + 2 * n))
        load = sparse.csr_matrix((np.ones(na), (ai, np.arange(na))), shape=(n, na))
        rows_hi = sparse.hstack([load, zero, -eye]).tocsr()[np.flatnonzero(hi_fin)]
        rows_lo = sparse.hstack([-load, -eye, zero])
        A_ub = sparse.vstack([rows_hi, rows_lo]).tocsr()
        b_ub = np.concatenate([upper[hi_fin], -lower])
        res = linprog(obj, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=np.ones(m), bounds=(0, None), method="highs-ds")
        if res.status != 0:
            raise LPError(f"HiGHS failed: {res.message}")
        u = res.eqlin.marginals
        lam = res.ineqlin.marginals
        p = np.zeros(n)
        p[hi_fin] = lam[:nh]
        w = p - lam[nh:]
        red = c - w[:, None] - u[None, :]
        best = np.argmin(red, axis=0)
        neg = red[best, np.arange(m)] < -1e-9
        if not neg.any() or rounds >= max_rounds:
            break
        arc_code = np.union1d(arc_code, best[neg].astype(np.int64) * m + np.flatnonzero(neg))
    x = res.x[:na]
    frac = sparse.csr_matrix((x, (aj, ai)), shape=(m, n)).toarray()
    assign0 = np.argmax(frac, axis=1)
    integral = bool(np.abs(frac - np.round(frac)).max(initial=0.0) < 1e-6)
    return assign0, w, float(res.x[na:].max(initial=0.0)), integral, rounds, na


def solve_assignment_lp(cost: np.ndarray, bounds: VolumeBounds, w0: np.ndarray | None = None,
                        init: np.ndarray | None = None, band: float = 0.15, k0: int = 2,
                        max_rounds: int = 50) -> tuple[np.ndarray, np.ndarray, LPCertificate]:
    """Min sum cost[i, j] xi[i, j] s.t. every voxel fully assigned and loads within bounds.

    Only contested voxels (small gap between best and second-best penalised
    cost under the starting weights ``w0``) enter the LP; the rest stay fixed
    at their best cell. Fixed voxels that the LP duals price out are released
    and the LP is re-solved. The final duals are recomputed exactly as
    shortest-path potentials over all voxels, which certifies the result.
    Returns the 0-based assignment, the unshifted duals w and the certificate.
    """
    n, m = cost.shape
    # loads are integers, so fractional bounds are tightened to the integers inside
    # (or widened to the nearest integers when no integer lies inside); with
    # integral bounds every vertex of the LP is an integral assignment
    lo, hi = np.ceil(bounds.lower - 1e-9), np.floor(bounds.upper + 1e-9)
    gapless = lo > hi
    lo[gapless] = np.floor(bounds.lower[gapless])
    hi[gapless] = np.ceil(bounds.upper[gapless])
    bounds = VolumeBounds(lo, hi)
    if not bounds.feasible_for(m):
        raise LPError(
            f"infeasible volume bounds: sum lower {bounds.lower.sum():g}, m={m}, sum upper {bounds.upper.sum():g}"
        )
    scale = float(np.abs(cost).max()) or 1.0
    c = cost / scale
    w_start = np.zeros(n) if w0 is None else np.asarray(w0, float) / scale
    pen = c - w_start[:, None]
    start = np.argmin(pen, axis=0)
    if n > 1:
        two = np.partition(pen, 1, axis=0)[:2]
        gap = two[1] - two[0]
        active = gap <= np.quantile(gap, band)
    else:
        active = np.ones(m, dtype=bool)
    rounds = n_arcs = 0
    integral = True
    for attempt in range(60):
        fixed = ~active
        fl = np.bincount(start[fixed], minlength=n).astype(float)
        idx = np.flatnonzero(active)
        sub_init = None if init is None else init[idx]
        a_sub, w, slack, integral, r, n_arcs = _restricted_lp(
            c[:, idx], bounds.lower - fl, bounds.upper - fl, sub_init, k0, max_rounds
        )
        rounds += r
        if slack > 1e-7:
            # the fixed voxels make a bound unreachable: release voxels of overfull
            # cells and the cheapest candidates for cells short of their lower bound
            loads = fl + np.bincount(a_sub, minlength=n)
            fidx = np.flatnonzero(fixed)
            grow = np.zeros(m, dtype=bool)
            over = loads > bounds.upper + 1e-9
            grow[fidx[over[start[fidx]]]] = True
            for k in np.flatnonzero(loads < bounds.lower - 1e-9):
                extra = c[k, fidx] - c[start[fidx], fidx]
                take = int(2 * (bounds.lower[k] - loads[k])) + 16
                grow[fidx[np.argsort(extra, kind="stable")[:take]]] = True
            if not grow.any():
                grow[fidx] = True
            active |= grow
            continue
        # price the fixed voxels with the restricted duals
        fidx = np.flatnonzero(fixed)
        if fidx.size:
            pf = c[:, fidx] - w[:, None]
            viol = pf[start[fidx], np.arange(fidx.size)] - pf.min(axis=0) > 1e-9
        else:
            viol = np.zeros(0, dtype=bool)
        if viol.any():
            active[fidx[viol]] = True
            continue
        assign0 = start.copy()
        assign0[idx] = a_sub
        loads = np.bincount(assign0, minlength=n).astype(float)
        w_exact = _potentials(cost, assign0, loads, bounds, tol=0.5)
        if w_exact is not None:
            break
        # numerically marginal voxels: widen the band and retry
        band = min(1.0, 2 * band)
        active |= gap <= np.quantile(gap, band)
    else:
        raise LPError("assignment LP did not converge")
    log.debug("assignment LP: %d of %d voxels active, %d CG rounds", active.sum(), m, rounds)

    pen = cost - w_exact[:, None]
    umin = pen.min(axis=0)
    primal = float(cost[assign0, np.arange(m)].sum())
    dual = _dual_value(float(umin.sum()), w_exact, bounds)
    support_red = pen[assign0, np.arange(m)] - umin
    lo_gap = loads - bounds.lower
    hi_gap = np.where(np.isfinite(bounds.upper), bounds.upper - loads, 0.0)
    cs_bounds = np.maximum(np.maximum(w_exact, 0) * lo_gap, np.maximum(-w_exact, 0) * hi_gap)
    cs = float(max(support_red.max(initial=0.0), cs_bounds.max(initial=0.0)))
    cert = LPCertificate(primal, dual, abs(primal - dual), cs, loads, bounds, integral, rounds,
                         n_arcs, assign0 + 1, np.zeros((0, 3)))
    return assign0, w_exact, cert


def fit_lp_dual(gmap: GrainMap, bounds: VolumeBounds | None = None, kind=ModelKind.LAGUERRE,
                matrices: np.ndarray | None = None, epsilon: float = 2.0, coreset: Coreset | None = None,
                sites: np.ndarray | None = None, events: list | None = None) -> tuple[Tessellation, LPCertificate]:
    """Weights from the duals of the volume-bounded assignment LP.

    Sites default to the grain barycentres; ``sites`` overrides them (used when
    refining a previous fit, and to check exact recovery with known sites).
    """
    kind = ModelKind.parse(kind)
    if kind is ModelKind.VORONOI:
        raise ValueError("the LP fit produces weights; voronoi output is not supported")
    vol, bary, _ = all_moments(gmap.labels, gmap.n)
    if matrices is None:
        matrices = grain_matrices(gmap, kind, events)
    if coreset is None:
        coords = grid_coords(gmap.dims)
        gt = gmap.labels.ravel(order="F").astype(np.int64)
        fg = gt > 0
        coords, gt = coords[fg], gt[fg]
        ratio = 1.0
    else:
        coords = coreset.coords.astype(float)
        gt = coreset.labels.astype(np.int64)
        ratio = len(coreset) / float(vol.sum())
    if bounds is None:
        bounds = VolumeBounds.around(vol, epsilon)
    if ratio != 1.0:
        bounds = VolumeBounds(bounds.lower * ratio, bounds.upper * ratio)
        if events is not None:
            events.append({"event": "coreset_bound_scaling", "ratio": ratio})
    if sites is not None:
        bary = np.asarray(sites, float).reshape(gmap.n, 3)
    cost = distance_matrix(bary, np.zeros(gmap.n), matrices, coords, kind.isotropic).T
    # starting weights only decide which voxels start out contested
    target = (bounds.lower + bounds.upper) / 2 if np.all(np.isfinite(bounds.upper)) else vol * ratio
    w0 = hq_weights(np.maximum(target, 1.0), matrices)
    _, w, cert = solve_assignment_lp(cost, bounds, w0=w0, init=gt - 1)
    cert.fit_coords = coords
    weights = dual_to_weights(w)
    tess = Tessellation(bary, weights, matrices, kind, gmap.dims)
    return tess, cert


# -- margin (SVM-style) LP --------------------------------------------------

# lifted monomials (1, u1, u2, u3, u1^2, u1u2, u1u3, u2^2, u2u3, u3^2)
_QUAD = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def lift(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, float)
    quad = np.stack([u[:, a] * u[:, b] for a, b in _QUAD], axis=1)
    return np.hstack([np.ones((len(u), 1)), u, quad])


def unlift(v: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """10-vector -> (alpha, a, M) with f(u) = alpha + a.u + u^T M u."""
    M = np.empty((3, 3))
    for k, (a, b) in enumerate(_QUAD):
        val = v[4 + k] if a == b else v[4 + k] / 2.0
        M[a, b] = M[b, a] = val
    return float(v[0]), np.asarray(v[1:4], float), M


def _free_mask(kind: ModelKind) -> np.ndarray:
    free = np.ones(10, dtype=bool)
    if kind.isotropic:
        free[4:] = False
    elif kind is ModelKind.DGBPD:
        free[[5, 6, 8]] = False
    return free


@dataclass
class SVMResult:
    objective: float
    slacks: np.ndarray
    repaired: bool
    shift: float
    floored: list[int]
    status: str


def _decode(alphas, lin, quads, targets, kind: ModelKind):
    """Pick the gauge (common quadratic t*I and common linear term) whose sites best match targets.

    Adding the same quadratic function to every f_i leaves the diagram unchanged,
    so t is chosen just large enough for positive definiteness and then scanned
    upwards; the common linear term is a least-squares fit of sites to targets.
    """
    n = len(alphas)
    lam_min = min(np.linalg.eigvalsh(Q).min() for Q in quads)
    t0 = max(0.0, 1e-6 - lam_min) if not kind.isotropic else 1.0
    best = None
    scan = [t0] if kind.isotropic else t0 + np.geomspace(1e-6, 1e3, 60) * max(1.0, abs(lam_min))
    for t in scan:
        Ms = quads + t * np.eye(3)
        Minv = np.linalg.inv(Ms)
        # x_i = -1/2 Minv_i (a_i + a0): least squares in a0 (and in t's scale for isotropic)
        if kind.isotropic:
            # x_i = -(a_i + a0) / (2 t'); fit beta = 1/(2t') > 0 and v = -beta a0
            Amat = np.zeros((3 * n, 4))
            Amat[:, 0] = -lin.ravel()
            Amat[:, 1:] = np.tile(np.eye(3), (n, 1))
            sol, *_ = np.linalg.lstsq(Amat, targets.ravel(), rcond=None)
            beta = sol[0] if sol[0] > 0 else 1.0
            v = sol[1:] if sol[0] > 0 else targets.mean(0) + beta * lin.mean(0)
            tt = 1.0 / (2 * beta)
            x = -beta * lin + v
            a0 = -v / beta
            Ms = np.broadcast_to(tt * np.eye(3), (n, 3, 3)).copy()
        else:
            Amat = np.concatenate([-0.5 * Minv[i] for i in range(n)], axis=0)
            rhs = (targets + 0.5 * np.einsum("nij,nj->ni", Minv, lin)).ravel()
            a0, *_ = np.linalg.lstsq(Amat, rhs, rcond=None)
            x = -0.5 * np.einsum("nij,nj->ni", Minv, lin + a0)
        err = float(np.sum((x - targets) ** 2))
        if best is None or err < best[0] - 1e-12:
            best = (err, t, x, Ms, a0)
    err, t, x, Ms, a0 = best
    # f_i + common = alpha_i + (a_i + a0).u + u^T M_i u = (u - x_i)^T M_i (u - x_i) - w_i
    w = np.einsum("ni,nij,nj->n", x, Ms, x) - alphas
    return x, Ms, w, t


def fit_lp_svm(gmap: GrainMap, coreset: Coreset, kind=ModelKind.GBPD, margin: float = 1.0,
               events: list | None = None) -> tuple[Tessellation, SVMResult]:
    """Margin LP over lifted generator vectors; see module docstring.

    Sampled interior voxels get hard constraints f_i + 1 <= f_l; the remaining
    coreset voxels get f_i - f_l + margin <= zeta_j with zeta_j >= 0 and the LP
    minimises sum(zeta). ``margin=0`` gives the unit-free variant.
    """
    kind = ModelKind.parse(kind)
    if kind is ModelKind.VORONOI:
        raise ValueError("the LP fit produces weights; voronoi output is not supported")
    n = gmap.n
    if n == 1:
        _, bary, _ = all_moments(gmap.labels, 1)
        mats = np.eye(3)[None]
        return Tessellation(bary, [0.0], mats, kind, gmap.dims), SVMResult(0.0, np.zeros(len(coreset)), False, 0.0, [], "single grain")
    center = (np.array(gmap.dims, float) - 1) / 2
    s = max(gmap.dims) / 2.0
    free = _free_mask(kind)
    nf = int(free.sum())
    # generator 1 is pinned to zero (gauge); variables: generators 2..n, then zeta
    nvar_g = (n - 1) * nf

    def rows_for(coords, labels, with_slack):
        Y = lift((coords - center) / s)[:, free]
        k = len(Y)
        r_idx, c_idx, vals = [], [], []
        row = 0
        zeta_rows = []
        for jpt in range(k):
            i = int(labels[jpt]) - 1
            for ell in range(n):
                if ell == i:
                    continue
                if i > 0:
                    r_idx += [row] * nf
                    c_idx += list(range((i - 1) * nf, i * nf))
                    vals += list(Y[jpt])
                if ell > 0:
                    r_idx += [row] * nf
                    c_idx += list(range((ell - 1) * nf, ell * nf))
                    vals += list(-Y[jpt])
                zeta_rows.append((row, jpt))
                row += 1
        return row, r_idx, c_idx, vals, zeta_rows

    nb = len(coreset)
    rb, ri, ci, vb, zr = rows_for(coreset.coords.astype(float), coreset.labels, True)
    r_idx, c_idx, vals = list(ri), list(ci), list(vb)
    for row, jpt in zr:
        r_idx.append(row)
        c_idx.append(nvar_g + jpt)
        vals.append(-1.0)
    b = [-margin] * rb
    ninner = len(coreset.interior_coords)
    if ninner:
        rh, rih, cih, vh, _ = rows_for(coreset.interior_coords.astype(float), coreset.interior_labels, False)
        r_idx += [r + rb for r in rih]
        c_idx += cih
        vals += vh
        b += [-1.0] * rh
    nrows = len(b)
    A = sparse.csr_matrix((vals, (r_idx, c_idx)), shape=(nrows, nvar_g + nb))
    cost = np.concatenate([np.zeros(nvar_g), np.ones(nb)])
    lb = [(None, None)] * nvar_g + [(0, None)] * nb
    res = linprog(cost, A_ub=A, b_ub=np.array(b), bounds=lb, method="highs-ds")
    if res.status == 2:
        raise LPError("margin LP infeasible (interior samples of different grains overlap)")
    if res.status != 0:
        raise LPError(f"HiGHS failed: {res.message}")
    vec = np.zeros((n, 10))
    vec[1:, free] = res.x[:nvar_g].reshape(n - 1, nf)
    alphas = np.empty(n)
    lin = np.empty((n, 3))
    quads = np.empty((n, 3, 3))
    for i in range(n):
        alphas[i], lin[i], quads[i] = unlift(vec[i])
    _, bary, _ = all_moments(gmap.labels, n)
    targets = (bary - center) / s
    x_u, M_u, w, t = _decode(alphas, lin, quads, targets, kind)
    # back to voxel coordinates: y = center + s u
    sites = center + s * x_u
    mats = M_u / s**2
    floored = []
    lam = np.linalg.eigvalsh(mats)
    if kind.isotropic:
        scale = mats[:, 0, 0]
        w = w / scale
        mats = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    else:
        for i in range(n):
            if lam[i].min() < EIG_FLOOR:
                floored.append(i + 1)
                lam_i, U = np.linalg.eigh(mats[i])
                mats[i] = (U * np.maximum(lam_i, EIG_FLOOR)) @ U.T
        if kind is ModelKind.DGBPD:
            mats = np.stack([np.diag(np.diag(M)) for M in mats])
    if floored:
        warnings.warn(f"decoded matrices not positive definite for grains {floored}; floored", RuntimeWarning)
    if events is not None:
        events.append({"event": "svm_gauge_shift", "t": float(t)})
        if floored:
            events.append({"event": "eigenvalue_floor", "grains": floored})
    w = dual_to_weights(w)
    tess = Tessellation(sites, w, 0.5 * (mats + np.swapaxes(mats, 1, 2)), kind, gmap.dims)
    zeta = res.x[nvar_g:]
    return tess, SVMResult(float(res.fun), zeta, t > 0, float(t), floored, res.message)
