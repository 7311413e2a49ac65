"""Optimisation-free generators: H0 (zero weights) and Hq (volume-matched weights)."""

from __future__ import annotations

import warnings

import numpy as np

from .diagram import EIG_FLOOR, ModelKind, Tessellation
from .grid import GrainMap, all_moments


def pca_matrix(cov: np.ndarray, floor: float = EIG_FLOOR) -> tuple[np.ndarray, bool]:
    """``U diag(1/lambda) U^T`` from a covariance; eigenvalues floored first."""
    lam, U = np.linalg.eigh(0.5 * (cov + cov.T))
    floored = bool(lam.min() < floor)
    lam = np.maximum(lam, floor)
    M = (U / lam) @ U.T
    return 0.5 * (M + M.T), floored


def _diag_only(M: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    return np.diag(np.maximum(np.diag(M), floor))


def grain_matrices(gmap: GrainMap, kind: ModelKind, events: list | None = None) -> np.ndarray:
    """Per-grain matrices for the given model kind (identity for isotropic kinds)."""
    kind = ModelKind.parse(kind)
    n = gmap.n
    if kind.isotropic:
        return np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    _, _, cov = all_moments(gmap.labels, n)
    mats = np.empty((n, 3, 3))
    flat = []
    for i in range(n):
        M, floored = pca_matrix(cov[i])
        if floored:
            flat.append(i + 1)
        mats[i] = _diag_only(M) if kind is ModelKind.DGBPD else M
    if flat:
        msg = f"degenerate covariance (rank < 3) floored at {EIG_FLOOR:g} for grains {flat}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        if events is not None:
            events.append({"event": "eigenvalue_floor", "grains": flat})
    return mats


def hq_weights(volumes: np.ndarray, matrices: np.ndarray) -> np.ndarray:
    """w_i = (3|C_i| / (4 pi sqrt(det B_i)))^(2/3) with B_i = M_i^{-1}.

    For the identity this is the Laguerre rule; for the PCA matrix it is the
    covariance rule, since M_i^{-1} is the (floored) sample covariance.
    """
    det_m = np.linalg.det(matrices)
    if np.any(det_m <= 0):
        raise ValueError("det(B_i) <= 0; matrices must be positive definite")
    sqrt_det_b = 1.0 / np.sqrt(det_m)
    return (3.0 * np.asarray(volumes, float) / (4.0 * np.pi * sqrt_det_b)) ** (2.0 / 3.0)


def fit_h0(gmap: GrainMap, kind=ModelKind.VORONOI, events: list | None = None) -> Tessellation:
    """Sites at barycentres, all weights zero; PCA matrices for the GBPD kinds."""
    kind = ModelKind.parse(kind)
    _, bary, _ = all_moments(gmap.labels, gmap.n)
    mats = grain_matrices(gmap, kind, events)
    return Tessellation(bary, np.zeros(gmap.n), mats, kind, gmap.dims)


def fit_hq(gmap: GrainMap, kind=ModelKind.LAGUERRE, events: list | None = None) -> Tessellation:
    kind = ModelKind.parse(kind)
    if kind is ModelKind.VORONOI:
        raise ValueError("Hq is not defined for voronoi (weights would be nonzero)")
    vol, bary, _ = all_moments(gmap.labels, gmap.n)
    mats = grain_matrices(gmap, kind, events)
    if kind is ModelKind.DGBPD and events is not None:
        events.append({"event": "dgbpd_matrix", "rule": "diagonal of full PCA matrix"})
    w = hq_weights(vol, mats)
    return Tessellation(bary, w, mats, kind, gmap.dims)
