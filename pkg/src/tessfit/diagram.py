"""Generators, anisotropic power distances and voxel discretisation of diagrams.

A generator is a triple ``(x, M, w)`` and its power distance to a point ``y``
is ``(y - x)^T M (y - x) - w``. Cells are indexed 1..n (label 0 is never
produced by :func:`assign`); generator arrays are 0-based internally.
"""

from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import LABEL_DTYPE, grid_coords

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-9
SYM_RTOL = 1e-8
CHUNK = 1 << 14


class ModelKind(str, enum.Enum):
    VORONOI = "voronoi"
    LAGUERRE = "laguerre"
    DGBPD = "dgbpd"
    GBPD = "gbpd"

    @classmethod
    def parse(cls, value) -> "ModelKind":
        if isinstance(value, cls):
            return value
        v = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {"diagonalgbpd": "dgbpd", "power": "laguerre"}
        return cls(aliases.get(v, v))

    @property
    def isotropic(self) -> bool:
        return self in (ModelKind.VORONOI, ModelKind.LAGUERRE)


class DiagramError(ValueError):
    pass


def floor_spd(M: np.ndarray, floor: float = EIG_FLOOR) -> tuple[np.ndarray, bool]:
    """Symmetric matrix with eigenvalues clipped from below; also reports whether clipping happened."""
    M = np.asarray(M, dtype=float)
    S = 0.5 * (M + M.T)
    lam, U = np.linalg.eigh(S)
    if lam.min() >= floor:
        return S, False
    lam = np.maximum(lam, floor)
    out = (U * lam) @ U.T
    return 0.5 * (out + out.T), True


def check_symmetric(M: np.ndarray) -> None:
    M = np.asarray(M, dtype=float)
    if M.shape != (3, 3):
        raise DiagramError(f"matrix must be 3x3, got {M.shape}")
    scale = max(np.abs(M).max(), 1e-300)
    if np.abs(M - M.T).max() > SYM_RTOL * scale:
        raise DiagramError("matrix is not symmetric")


@dataclass(frozen=True)
class Generator:
    x: np.ndarray
    w: float = 0.0
    M: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        check_symmetric(self.M)
        M, _ = floor_spd(self.M)
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(3))
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "w", float(self.w))


def power_distance(g: Generator, y) -> float:
    d = np.asarray(y, dtype=float) - g.x
    return float(d @ g.M @ d - g.w)


@dataclass
class Tessellation:
    """n generators stored as arrays: sites (n,3), weights (n,), matrices (n,3,3)."""

    sites: np.ndarray
    weights: np.ndarray
    matrices: np.ndarray
    kind: ModelKind
    dims: tuple[int, int, int]

    def __post_init__(self):
        self.kind = ModelKind.parse(self.kind)
        self.sites = np.asarray(self.sites, dtype=float).reshape(-1, 3)
        n = len(self.sites)
        if n < 1:
            raise DiagramError("a tessellation needs at least one generator")
        self.weights = np.asarray(self.weights, dtype=float).reshape(n)
        self.matrices = np.asarray(self.matrices, dtype=float).reshape(n, 3, 3)
        self.dims = tuple(int(d) for d in self.dims)
        self.validate()

    @property
    def n(self) -> int:
        return len(self.sites)

    @property
    def generators(self) -> list[Generator]:
        return [Generator(x, w, M) for x, w, M in zip(self.sites, self.weights, self.matrices)]

    @classmethod
    def from_generators(cls, gens, kind, dims) -> "Tessellation":
        return cls(
            np.array([g.x for g in gens]),
            np.array([g.w for g in gens]),
            np.array([g.M for g in gens]),
            kind,
            dims,
        )

    @classmethod
    def isotropic(cls, sites, weights=None, kind=ModelKind.LAGUERRE, dims=(1, 1, 1)):
        sites = np.asarray(sites, dtype=float).reshape(-1, 3)
        n = len(sites)
        w = np.zeros(n) if weights is None else weights
        return cls(sites, w, np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), kind, dims)

    def validate(self) -> None:
        for M in self.matrices:
            check_symmetric(M)
        lam = np.linalg.eigvalsh(self.matrices)
        if lam.min() < EIG_FLOOR * (1 - 1e-6):
            raise DiagramError(f"matrix eigenvalue {lam.min():g} below floor {EIG_FLOOR:g}")
        eye = np.eye(3)
        if self.kind.isotropic and not np.array_equal(self.matrices, np.broadcast_to(eye, self.matrices.shape)):
            raise DiagramError(f"{self.kind.value} requires identity matrices")
        if self.kind is ModelKind.VORONOI and np.any(self.weights != 0):
            raise DiagramError("voronoi requires zero weights")
        if self.kind is ModelKind.DGBPD:
            off = self.matrices * (1 - eye)
            if np.any(off != 0):
                raise DiagramError("dgbpd requires diagonal matrices")

    def copy(self) -> "Tessellation":
        return Tessellation(self.sites.copy(), self.weights.copy(), self.matrices.copy(), self.kind, self.dims)

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        gens = []
        for x, w, M in zip(self.sites, self.weights, self.matrices):
            g = {"x": [float(v) for v in x], "w": float(w)}
            if self.kind is ModelKind.DGBPD:
                g["M_diag"] = [float(v) for v in np.diag(M)]
            elif self.kind is ModelKind.GBPD:
                g["M"] = [[float(v) for v in row] for row in M]
            gens.append(g)
        return {"kind": self.kind.value, "generators": gens, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, data: dict) -> "Tessellation":
        kind = ModelKind.parse(data["kind"])
        sites, weights, mats = [], [], []
        for g in data["generators"]:
            sites.append(g["x"])
            weights.append(g.get("w", 0.0))
            if "M" in g:
                mats.append(g["M"])
            elif "M_diag" in g:
                mats.append(np.diag(g["M_diag"]))
            else:
                mats.append(np.eye(3))
        return cls(np.array(sites, float), np.array(weights, float), np.array(mats, float), kind, data["dims"])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> "Tessellation":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class LabelField:
    """Discretised diagram: cell label (1..n, 0 only if produced elsewhere) per voxel."""

    labels: np.ndarray
    n: int

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise DiagramError("label field must be 3D")
        lab = lab.astype(LABEL_DTYPE, copy=False)
        object.__setattr__(self, "labels", lab)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)


# -- distances and assignment ---------------------------------------------


def distance_matrix(sites, weights, matrices, coords, isotropic: bool | None = None) -> np.ndarray:
    """Power distances (k, n) of k points to n generators."""
    coords = np.asarray(coords, dtype=float)
    diff = coords[:, None, :] - sites[None, :, :]
    if isotropic is None:
        isotropic = bool(np.array_equal(matrices, np.broadcast_to(np.eye(3), matrices.shape)))
    if isotropic:
        quad = np.einsum("kni,kni->kn", diff, diff)
    else:
        quad = np.einsum("kni,nij,knj->kn", diff, matrices, diff)
    return quad - weights[None, :]


def tess_distances(tess: Tessellation, coords) -> np.ndarray:
    return distance_matrix(tess.sites, tess.weights, tess.matrices, coords, tess.kind.isotropic)


def assign_coords(tess: Tessellation, coords, threads: int | None = None) -> np.ndarray:
    """1-based argmin label per point; ties go to the lowest generator index."""
    coords = np.asarray(coords, dtype=float)
    out = np.empty(len(coords), dtype=LABEL_DTYPE)

    def work(start):
        stop = min(start + CHUNK, len(coords))
        D = tess_distances(tess, coords[start:stop])
        out[start:stop] = np.argmin(D, axis=1) + 1

    starts = range(0, len(coords), CHUNK)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, starts))
    else:
        for s in starts:
            work(s)
    return out


def assign(tess: Tessellation, dims=None, threads: int | None = None) -> LabelField:
    dims = tuple(dims or tess.dims)
    flat = assign_coords(tess, grid_coords(dims), threads)
    return LabelField(flat.reshape(dims, order="F"), tess.n)


def tie_mask(tess: Tessellation, coords, rtol: float = 1e-9) -> np.ndarray:
    """Points whose two smallest power distances agree to within ``rtol`` (relative)."""
    coords = np.asarray(coords, dtype=float)
    out = np.zeros(len(coords), dtype=bool)
    if tess.n < 2:
        return out
    for s in range(0, len(coords), CHUNK):
        D = tess_distances(tess, coords[s : s + CHUNK])
        part = np.partition(D, 1, axis=1)
        scale = np.maximum(1.0, np.abs(part[:, :2]).max(axis=1))
        out[s : s + CHUNK] = part[:, 1] - part[:, 0] <= rtol * scale
    return out


def empty_cells(field: LabelField, n: int | None = None) -> list[int]:
    n = field.n if n is None else n
    counts = np.bincount(field.labels.ravel(), minlength=n + 1)[1 : n + 1]
    return (np.flatnonzero(counts == 0) + 1).tolist()


# -- facet distance (Laguerre) ----------------------------------------------


def _halfspaces(tess: Tessellation, i0: int, j0: int):
    """Bisector plane (a, b) for cells i0/j0 and inequalities A z <= B for the rest (0-based)."""
    X, w = tess.sites, tess.weights
    sq = np.einsum("ni,ni->n", X, X)
    a = 2.0 * (X[j0] - X[i0])
    b = sq[j0] - sq[i0] - w[j0] + w[i0]
    rest = [k for k in range(tess.n) if k not in (i0, j0)]
    A = 2.0 * (X[rest] - X[i0])
    B = sq[rest] - sq[i0] - w[rest] + w[i0]
    return a, b, A.reshape(-1, 3), B.reshape(-1)


def _project(y, G, h):
    """Closest point to y on {G z = h} and the multipliers; None if inconsistent."""
    GG = G @ G.T
    r = G @ y - h
    try:
        mu = np.linalg.solve(GG, r)
    except np.linalg.LinAlgError:
        mu, *_ = np.linalg.lstsq(GG, r, rcond=None)
        if np.linalg.norm(GG @ mu - r) > 1e-9 * (1 + np.linalg.norm(r)):
            return None, None
    return y - G.T @ mu, mu


def _feasible(z, A, B, tol):
    return A.size == 0 or np.all(A @ z - B <= tol * np.maximum(1.0, np.abs(B)))


def facet_distance_laguerre(y, i: int, j: int, tess: Tessellation, return_empty: bool = False):
    """Squared distance from y to the facet C_i ∩ C_j of a Laguerre diagram (cells 1-based).

    Solved as a small convex QP by a primal-dual active-set loop started from the
    projection onto the bisector plane. If the facet is empty the squared distance
    to the bisector plane is returned instead (logged).
    """
    if not tess.kind.isotropic:
        raise DiagramError("facet distance is only available for voronoi/laguerre")
    y = np.asarray(y, dtype=float)
    i0, j0 = i - 1, j - 1
    a, b, A, B = _halfspaces(tess, i0, j0)
    if np.allclose(tess.sites[i0], tess.sites[j0], rtol=0, atol=1e-12):
        if tess.weights[i0] != tess.weights[j0]:
            raise DiagramError(f"coincident sites {i}, {j} with different weights: no bisector")
        eq_rows = np.zeros((0, 3))
        eq_rhs = np.zeros(0)
        plane_d = 0.0
    else:
        eq_rows = a[None]
        eq_rhs = np.array([b])
        plane_d = float((a @ y - b) ** 2 / (a @ a))

    d, empty = _active_set(y, eq_rows, eq_rhs, A, B)
    if d is None:
        d, empty = _enumerate_facet(y, eq_rows, eq_rhs, A, B)
    if empty:
        log.debug("empty facet %d/%d: falling back to bisector-plane distance", i, j)
        d = plane_d
    return (d, empty) if return_empty else d


def _active_set(y, E, e, A, B, max_iter: int = 50, tol: float = 1e-9):
    work: list[int] = []
    for _ in range(max_iter):
        G = np.vstack([E, A[work]]) if work else E
        h = np.concatenate([e, B[work]]) if work else e
        if len(G) == 0:
            z, mu = y.copy(), np.zeros(0)
        else:
            if len(G) > 3:
                return None, None
            z, mu = _project(y, G, h)
            if z is None:
                return None, None
        ineq_mu = mu[len(E) :]
        if ineq_mu.size and ineq_mu.min() < -tol:
            del work[int(np.argmin(ineq_mu))]
            continue
        if A.size == 0:
            return float(np.sum((y - z) ** 2)), False
        viol = A @ z - B
        viol[work] = -np.inf
        k = int(np.argmax(viol))
        if viol[k] <= tol * max(1.0, abs(B[k])):
            return float(np.sum((y - z) ** 2)), False
        work.append(k)
    return None, None


def _enumerate_facet(y, E, e, A, B, tol: float = 1e-9):
    """Exact fallback: min over all KKT candidates (plane, edges, vertices)."""
    best = np.inf
    K = len(A)
    cands = [[]] + [[k] for k in range(K)] + [[k, l] for k in range(K) for l in range(k + 1, K)]
    for act in cands:
        G = np.vstack([E, A[act]]) if act else E
        h = np.concatenate([e, B[act]]) if act else e
        if len(G) == 0:
            z = y
        else:
            if np.linalg.matrix_rank(G) < len(G):
                continue
            z, _ = _project(y, G, h)
            if z is None:
                continue
        if _feasible(z, A, B, tol):
            best = min(best, float(np.sum((y - z) ** 2)))
    if not np.isfinite(best):
        return None, True
    return best, False


def facet_distances_batch(Y, I, J, sites, weights, tol: float = 1e-9):
    """Vectorised facet distances for many parameter sets at once.

    Y: (T, 3) test points, I/J: (T,) 0-based cell pairs, sites: (S, n, 3),
    weights: (S, n). Returns (dist (S, T), empty (S, T)). Exact: the facet is a
    convex polygon in the bisector plane, so the nearest point is the plane
    projection, an edge projection or a vertex.
    """
    Y = np.asarray(Y, float)
    I = np.asarray(I, int)
    J = np.asarray(J, int)
    S, n, _ = sites.shape
    T = len(Y)
    sq = np.einsum("sni,sni->sn", sites, sites)
    Xi, Xj = sites[:, I], sites[:, J]
    a = 2.0 * (Xj - Xi)  # (S,T,3)
    b = sq[:, J] - sq[:, I] - weights[:, J] + weights[:, I]
    aa = np.einsum("sti,sti->st", a, a)
    r = np.einsum("sti,ti->st", a, Y) - b
    with np.errstate(divide="ignore", invalid="ignore"):
        plane_d = r * r / aa
        p = Y[None] - a * (r / aa)[..., None]
    dist = plane_d.copy()
    empty = np.zeros((S, T), dtype=bool)
    if n <= 2:
        return dist, empty

    others = np.array([[k for k in range(n) if k not in (i, j)] for i, j in zip(I, J)], dtype=int)
    K = others.shape[1]
    A = 2.0 * (sites[:, others] - Xi[:, :, None, :])  # (S,T,K,3)
    Bv = sq[:, others] - sq[:, I][..., None] - weights[:, others] + weights[:, I][..., None]
    thr = tol * np.maximum(1.0, np.abs(Bv))

    viol = np.einsum("stki,sti->stk", A, p) - Bv
    inside = np.all(viol <= thr, axis=2)
    todo = ~inside
    if not todo.any():
        return dist, empty

    s_idx, t_idx = np.nonzero(todo)
    a_u = a[s_idx, t_idx]  # (U,3)
    b_u = b[s_idx, t_idx]
    A_u = A[s_idx, t_idx]  # (U,K,3)
    B_u = Bv[s_idx, t_idx]
    thr_u = thr[s_idx, t_idx]
    y_u = Y[t_idx]
    v_u = viol[s_idx, t_idx]
    U = len(s_idx)
    best = np.full(U, np.inf)

    # edges: project y on {a z = b, A_k z = B_k}
    aa_u = np.einsum("ui,ui->u", a_u, a_u)[:, None]
    ak = np.einsum("ui,uki->uk", a_u, A_u)
    kk = np.einsum("uki,uki->uk", A_u, A_u)
    det = aa_u * kk - ak * ak
    ra = (np.einsum("ui,ui->u", a_u, y_u) - b_u)[:, None]
    rk = np.einsum("uki,ui->uk", A_u, y_u) - B_u
    with np.errstate(divide="ignore", invalid="ignore"):
        mu_a = (kk * ra - ak * rk) / det
        mu_k = (aa_u * rk - ak * ra) / det
        z = y_u[:, None, :] - mu_a[..., None] * a_u[:, None, :] - mu_k[..., None] * A_u
    ok = (np.abs(det) > 1e-12 * aa_u * kk) & (v_u > thr_u)
    zv = np.einsum("uki,uli->ukl", z, A_u)
    feas = np.all(zv - B_u[:, None, :] <= thr_u[:, None, :], axis=2) & ok
    dz = np.einsum("uki,uki->uk", y_u[:, None, :] - z, y_u[:, None, :] - z)
    dz = np.where(feas, dz, np.inf)
    best = np.minimum(best, dz.min(axis=1))

    # vertices for points still unresolved
    rem = ~np.isfinite(best)
    if rem.any() and K >= 2:
        ridx = np.flatnonzero(rem)
        kk1, kk2 = np.triu_indices(K, 1)
        a_r = a_u[ridx][:, None, :]
        A1 = A_u[ridx][:, kk1]
        A2 = A_u[ridx][:, kk2]
        b_r = b_u[ridx][:, None]
        B1 = B_u[ridx][:, kk1]
        B2 = B_u[ridx][:, kk2]
        c12 = np.cross(A1, A2)
        c2a = np.cross(A2, a_r)
        ca1 = np.cross(a_r, A1)
        den = np.einsum("upi,upi->up", np.broadcast_to(a_r, c12.shape), c12)
        with np.errstate(divide="ignore", invalid="ignore"):
            vtx = (b_r[..., None] * c12 + B1[..., None] * c2a + B2[..., None] * ca1) / den[..., None]
        scale = np.linalg.norm(a_r, axis=2) * np.linalg.norm(A1, axis=2) * np.linalg.norm(A2, axis=2)
        good = np.abs(den) > 1e-12 * scale
        vv = np.einsum("upi,uki->upk", vtx, A_u[ridx]) - B_u[ridx][:, None, :]
        vfeas = np.all(vv <= thr_u[ridx][:, None, :], axis=2) & good
        yv = y_u[ridx][:, None, :] - vtx
        dv = np.where(vfeas, np.einsum("upi,upi->up", yv, yv), np.inf)
        best[ridx] = dv.min(axis=1)

    miss = ~np.isfinite(best)
    out_d = np.where(miss, plane_d[s_idx, t_idx], best)
    dist[s_idx, t_idx] = out_d
    empty[s_idx, t_idx] = miss
    return dist, empty
