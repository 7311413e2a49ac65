"""Gradient-based fitting through a softmax relaxation of the cell indicator.

Every voxel gets soft cell probabilities ``p = softmax(-D / tau)`` from its
power distances D, and the fit maximises the mean binary log-likelihood of the
GT indicators. Matrices are parameterised as M = L L^T with a log diagonal.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .diagram import ModelKind, Tessellation, assign
from .grid import GrainMap, all_moments, grid_coords
from .heuristics import fit_h0, fit_hq

log = logging.getLogger(__name__)

CLAMP = 1e-7
_TRIL = (np.array([1, 2, 2]), np.array([0, 0, 1]))


@dataclass(frozen=True)
class GDConfig:
    max_epochs: int = 25
    batch_size: int = 4096
    tau: float | str | None = None  # None/"auto": from GT boundaries; "diameter": mean diameter squared
    tau_width: float = 1.0
    lr_sites: float = 0.1
    lr_weights: float = 0.1  # multiplied by tau
    lr_factors: float = 0.01
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.tau, (int, float)) and self.tau <= 0:
            raise ValueError("tau must be positive")
        if min(self.lr_sites, self.lr_weights, self.lr_factors) <= 0:
            raise ValueError("learning rates must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")


@dataclass
class GDParams:
    """Free-form parameter state; which groups move depends on ``kind``."""

    sites: np.ndarray  # (n, 3)
    weights: np.ndarray  # (n,)
    logdiag: np.ndarray  # (n, 3) log of diag(L)
    off: np.ndarray  # (n, 3) L[1,0], L[2,0], L[2,1]
    kind: ModelKind

    GROUPS = ("sites", "weights", "logdiag", "off")

    @classmethod
    def from_tessellation(cls, tess: Tessellation) -> "GDParams":
        n = tess.n
        L = np.linalg.cholesky(tess.matrices)
        logd = np.log(np.einsum("nii->ni", L))
        off = L[:, _TRIL[0], _TRIL[1]]
        if tess.kind.isotropic:
            logd = np.zeros((n, 3))
        if tess.kind is not ModelKind.GBPD:
            off = np.zeros((n, 3))
        return cls(tess.sites.copy(), tess.weights.copy(), logd, off, tess.kind)

    def factors(self) -> np.ndarray:
        n = len(self.sites)
        L = np.zeros((n, 3, 3))
        L[:, [0, 1, 2], [0, 1, 2]] = np.exp(self.logdiag)
        L[:, _TRIL[0], _TRIL[1]] = self.off
        return L

    def matrices(self) -> np.ndarray:
        if self.kind.isotropic:
            return np.broadcast_to(np.eye(3), (len(self.sites), 3, 3)).copy()
        L = self.factors()
        M = L @ np.swapaxes(L, 1, 2)
        if self.kind is ModelKind.DGBPD:
            M = np.stack([np.diag(np.diag(m)) for m in M])
        return 0.5 * (M + np.swapaxes(M, 1, 2))

    def free(self) -> dict[str, bool]:
        k = self.kind
        return {
            "sites": True,
            "weights": k is not ModelKind.VORONOI,
            "logdiag": not k.isotropic,
            "off": k is ModelKind.GBPD,
        }

    def vector(self) -> np.ndarray:
        f = self.free()
        return np.concatenate([getattr(self, g).ravel() for g in self.GROUPS if f[g]])

    def with_vector(self, v: np.ndarray) -> "GDParams":
        f = self.free()
        out = GDParams(self.sites.copy(), self.weights.copy(), self.logdiag.copy(), self.off.copy(), self.kind)
        pos = 0
        for g in self.GROUPS:
            if f[g]:
                arr = getattr(out, g)
                arr[...] = np.asarray(v[pos : pos + arr.size]).reshape(arr.shape)
                pos += arr.size
        return out

    def to_tessellation(self, dims) -> Tessellation:
        w = np.zeros(len(self.sites)) if self.kind is ModelKind.VORONOI else self.weights - self.weights.min()
        return Tessellation(self.sites.copy(), w, self.matrices(), self.kind, dims)


def distance_vector(x, tess: Tessellation) -> np.ndarray:
    """Power distances of one point (or (k, 3) points) to all generators."""
    x = np.asarray(x, float)
    single = x.ndim == 1
    X = x.reshape(-1, 3)
    d = X[:, None, :] - tess.sites[None]
    D = np.einsum("kni,nij,knj->kn", d, tess.matrices, d) - tess.weights[None]
    return D[0] if single else D


def _softmax_neg(D: np.ndarray, tau: float) -> np.ndarray:
    z = -D / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_assignment(x, tess: Tessellation, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    return _softmax_neg(distance_vector(x, tess), tau)


def _voxels(gmap: GrainMap, subset) -> tuple[np.ndarray, np.ndarray]:
    """(k, 3) float coordinates and 1-based GT labels; default: all foreground voxels."""
    if subset is None:
        coords = grid_coords(gmap.dims)
        lab = gmap.labels.ravel(order="F").astype(np.int64)
        fg = lab > 0
        return coords[fg], lab[fg]
    pts = np.asarray(subset, dtype=np.int64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty voxel subset")
    return pts.astype(float), gmap.labels[tuple(pts.T)].astype(np.int64)


def _loss_grad(P: GDParams, Y: np.ndarray, lab: np.ndarray, tau: float, want_grad: bool = True):
    """Objective (mean over voxels of the binary log-likelihood) and its gradient per group."""
    n = len(P.sites)
    M = P.matrices()
    d = Y[:, None, :] - P.sites[None]  # (k, n, 3)
    Md = np.einsum("nij,knj->kni", M, d)
    D = np.einsum("kni,kni->kn", d, Md) - P.weights[None]
    p = _softmax_neg(D, tau)
    t = np.zeros_like(p)
    hit = lab > 0
    t[np.flatnonzero(hit), lab[hit] - 1] = 1.0
    pc = np.clip(p, CLAMP, 1 - CLAMP)
    k = len(Y)
    J = float(np.sum(t * np.log(pc) + (1 - t) * np.log1p(-pc)) / k)
    if not want_grad:
        return J, None
    live = (p > CLAMP) & (p < 1 - CLAMP)
    g = np.where(live, t / pc - (1 - t) / (1 - pc), 0.0) / k
    # through the softmax of z = -D / tau
    dz = p * (g - np.sum(p * g, axis=1, keepdims=True))
    dD = -dz / tau  # (k, n)
    grads = {}
    grads["sites"] = -2.0 * np.einsum("kn,kni->ni", dD, Md)
    grads["weights"] = -dD.sum(axis=0)
    if not P.kind.isotropic:
        G = np.einsum("kn,kni,knj->nij", dD, d, d)
        if P.kind is ModelKind.DGBPD:
            G = G * np.eye(3)
        L = P.factors()
        gL = 2.0 * G @ L
        grads["logdiag"] = np.einsum("nii->ni", gL) * np.exp(P.logdiag)
        grads["off"] = gL[:, _TRIL[0], _TRIL[1]]
    else:
        grads["logdiag"] = np.zeros((n, 3))
        grads["off"] = np.zeros((n, 3))
    free = P.free()
    for gname in P.GROUPS:
        if not free[gname]:
            grads[gname] = np.zeros_like(getattr(P, gname))
    return J, grads


def objective_soft(gmap: GrainMap, tess: Tessellation, tau: float, subset=None) -> float:
    Y, lab = _voxels(gmap, subset)
    return _loss_grad(GDParams.from_tessellation(tess), Y, lab, tau, want_grad=False)[0]


def gradient_soft(gmap: GrainMap, tess: Tessellation, tau: float, subset=None) -> dict[str, np.ndarray]:
    """Gradient of ``objective_soft`` w.r.t. sites, weights and the factor parameters."""
    Y, lab = _voxels(gmap, subset)
    return _loss_grad(GDParams.from_tessellation(tess), Y, lab, tau)[1]


def objective_params(P: GDParams, gmap: GrainMap, tau: float, subset=None) -> float:
    Y, lab = _voxels(gmap, subset)
    return _loss_grad(P, Y, lab, tau, want_grad=False)[0]


def gradient_params(P: GDParams, gmap: GrainMap, tau: float, subset=None) -> np.ndarray:
    """Gradient as a flat vector aligned with ``P.vector()``."""
    Y, lab = _voxels(gmap, subset)
    _, g = _loss_grad(P, Y, lab, tau)
    f = P.free()
    return np.concatenate([g[k].ravel() for k in P.GROUPS if f[k]])


def auto_tau(gmap: GrainMap, tess: Tessellation, width: float = 1.0, max_pairs: int = 2000) -> float:
    """Temperature from the typical change of D_j - D_i per voxel step across GT faces.

    With this scale the soft assignment switches over about ``width`` voxels
    at a boundary of the given diagram.
    """
    lab = gmap.labels.astype(np.int64)
    rng = np.random.default_rng(0)
    diffs = []
    for ax in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        a, b = lab[tuple(lo)], lab[tuple(hi)]
        p0 = np.argwhere((a != b) & (a > 0) & (b > 0))
        if len(p0) == 0:
            continue
        if len(p0) > max_pairs:
            p0 = p0[np.sort(rng.choice(len(p0), max_pairs, replace=False))]
        p1 = p0.copy()
        p1[:, ax] += 1
        i = lab[tuple(p0.T)] - 1
        j = lab[tuple(p1.T)] - 1
        r = np.arange(len(p0))
        D0 = distance_vector(p0.astype(float), tess)
        D1 = distance_vector(p1.astype(float), tess)
        diffs.append(np.abs((D1[r, j] - D1[r, i]) - (D0[r, j] - D0[r, i])))
    if not diffs:
        return 1.0
    val = float(np.median(np.concatenate(diffs)))
    return width * val if val > 0 else 1.0


def diameter_tau(gmap: GrainMap) -> float:
    vol, _, _ = all_moments(gmap.labels, gmap.n)
    return float(np.mean(np.cbrt(6 * vol / np.pi)) ** 2)


@dataclass
class GDTrace:
    epoch: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    best: list[float] = field(default_factory=list)
    tau: float = 1.0

    def add(self, e, obj):
        self.epoch.append(int(e))
        self.objective.append(float(obj))
        prev = self.best[-1] if self.best else -np.inf
        self.best.append(float(max(prev, obj)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "objective", "best_objective"])
        for row in zip(self.epoch, self.objective, self.best):
            w.writerow([row[0], repr(row[1]), repr(row[2])])
        return buf.getvalue()


def fit_gd(gmap: GrainMap, kind=ModelKind.LAGUERRE, config: GDConfig = GDConfig(),
           init: Tessellation | None = None, events: list | None = None) -> tuple[Tessellation, GDTrace]:
    """Minibatch ascent on the soft log-likelihood; returns the best full-data state."""
    kind = ModelKind.parse(kind)
    cfg = config
    if init is None:
        init = fit_h0(gmap, kind, events) if kind is ModelKind.VORONOI else fit_hq(gmap, kind, events)
    if init.kind is not kind:
        raise ValueError(f"init kind {init.kind.value} differs from {kind.value}")
    if cfg.tau in (None, "auto"):
        tau = auto_tau(gmap, init, cfg.tau_width)
    elif cfg.tau == "diameter":
        tau = diameter_tau(gmap)
    else:
        tau = float(cfg.tau)
    if events is not None:
        events.append({"event": "temperature", "tau": tau})
    P = GDParams.from_tessellation(init)
    Y, lab = _voxels(gmap, None)
    rng = np.random.default_rng(cfg.seed)
    f = P.free()
    scale_off = float(np.exp(P.logdiag).mean())
    lr = {"sites": cfg.lr_sites, "weights": cfg.lr_weights * tau, "logdiag": cfg.lr_factors,
          "off": cfg.lr_factors * scale_off}
    m1 = {g: np.zeros_like(getattr(P, g)) for g in P.GROUPS}
    m2 = {g: np.zeros_like(getattr(P, g)) for g in P.GROUPS}
    b1, b2, eps = 0.9, 0.999, 1e-12
    step = 0
    trace = GDTrace(tau=tau)
    best_J = _loss_grad(P, Y, lab, tau, want_grad=False)[0]
    best_P = P.with_vector(P.vector())
    trace.add(0, best_J)
    k = len(Y)
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(k)
        for s in range(0, k, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            _, g = _loss_grad(P, Y[idx], lab[idx], tau)
            step += 1
            for name in P.GROUPS:
                if not f[name]:
                    continue
                arr = getattr(P, name)
                if cfg.optimizer == "adam":
                    m1[name] = b1 * m1[name] + (1 - b1) * g[name]
                    m2[name] = b2 * m2[name] + (1 - b2) * g[name] ** 2
                    mh = m1[name] / (1 - b1**step)
                    vh = m2[name] / (1 - b2**step)
                    arr += lr[name] * mh / (np.sqrt(vh) + eps)
                else:
                    arr += lr[name] * g[name]
        J = _loss_grad(P, Y, lab, tau, want_grad=False)[0]
        trace.add(epoch, J)
        if J > best_J:
            best_J, best_P = J, P.with_vector(P.vector())
    return best_P.to_tessellation(gmap.dims), trace


def hard_accuracy(gmap: GrainMap, tess: Tessellation) -> float:
    fld = assign(tess, gmap.dims)
    fg = gmap.labels > 0
    return float(np.mean(fld.labels[fg] == gmap.labels[fg]))
