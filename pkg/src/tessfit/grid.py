"""Voxel grain maps: storage, raw+json I/O, moments, neighbourhoods.

Arrays are indexed ``labels[x, y, z]``. On disk the labels are written in
x-fastest order, i.e. ``labels.ravel(order="F")``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

LABEL_DTYPE = np.dtype("<u4")


class GrainMapError(ValueError):
    """Raised for malformed or invariant-violating grain maps."""


# all 26 neighbours, centre excluded
N26 = np.ones((3, 3, 3), dtype=bool)
N26[1, 1, 1] = False
N6 = ndimage.generate_binary_structure(3, 1)

# one representative of each +-offset pair in the 26-neighbourhood
_HALF_OFFSETS = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) > (0, 0, 0)
]


@dataclass(frozen=True)
class GrainMap:
    """Ground-truth grain map ``GT: W -> {0, ..., n}``; label 0 is background."""

    labels: np.ndarray
    n: int
    voxel_size: float = 1.0

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise GrainMapError(f"labels must be 3D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise GrainMapError("labels must be integers")
        if labels.size and labels.min() < 0:
            raise GrainMapError("negative labels")
        labels = labels.astype(LABEL_DTYPE, copy=False)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if self.voxel_size <= 0:
            raise GrainMapError("voxel_size must be positive")
        check_labels(labels, self.n)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    @property
    def m(self) -> int:
        return int(self.labels.size)

    def grain_mask(self, i: int) -> np.ndarray:
        return self.labels == i

    def grain_voxels(self, i: int) -> np.ndarray:
        """(k, 3) integer coordinates of grain ``i`` in x-fastest order."""
        return mask_coords(self.labels == i)

    def volumes(self) -> np.ndarray:
        """Voxel counts, index 0 is background."""
        return np.bincount(self.labels.ravel(), minlength=self.n + 1)


@dataclass(frozen=True)
class GrainMoments:
    index: int
    volume: int
    barycenter: np.ndarray
    covariance: np.ndarray


def check_labels(labels: np.ndarray, n: int) -> None:
    if n < 1:
        raise GrainMapError(f"n must be >= 1, got {n}")
    if labels.size == 0:
        raise GrainMapError("empty label array")
    top = int(labels.max())
    if top > n:
        raise GrainMapError(f"label {top} exceeds declared n={n}")
    counts = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    bad = np.flatnonzero(counts <= 1) + 1
    if bad.size:
        raise GrainMapError(
            f"grain cardinality must exceed 1 (|C_i| > 1); offending grains: {bad.tolist()}"
        )


def mask_coords(mask: np.ndarray) -> np.ndarray:
    """Coordinates of true voxels, ordered x-fastest like the on-disk layout."""
    idx = np.flatnonzero(mask.ravel(order="F"))
    return np.stack(np.unravel_index(idx, mask.shape, order="F"), axis=1)


def grid_coords(dims) -> np.ndarray:
    """All voxel centres of a window as an (m, 3) float array, x-fastest."""
    nx, ny, nz = dims
    x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    return np.stack([x.ravel(order="F"), y.ravel(order="F"), z.ravel(order="F")], axis=1).astype(
        float
    )


# -- I/O ---------------------------------------------------------------------


def _split_path(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".raw", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".raw"), p.with_suffix(".json")


def save_grain_map(gmap: GrainMap, path) -> tuple[Path, Path]:
    raw, side = _split_path(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(np.ascontiguousarray(gmap.labels.ravel(order="F"), dtype=LABEL_DTYPE).tobytes())
    meta = {"dims": list(gmap.dims), "voxel_size": float(gmap.voxel_size), "n_grains": int(gmap.n)}
    side.write_text(json.dumps(meta) + "\n")
    return raw, side


def load_grain_map(path) -> GrainMap:
    raw, side = _split_path(path)
    try:
        meta = json.loads(side.read_text())
        dims = [int(d) for d in meta["dims"]]
        n = int(meta["n_grains"])
        voxel_size = float(meta.get("voxel_size", 1.0))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise GrainMapError(f"malformed header {side}: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise GrainMapError(f"malformed header {side}: dims={dims}")
    data = np.frombuffer(raw.read_bytes(), dtype=LABEL_DTYPE)
    if data.size != int(np.prod(dims)):
        raise GrainMapError(f"{raw}: {data.size} labels, header dims {dims} need {int(np.prod(dims))}")
    return GrainMap(data.reshape(dims, order="F"), n=n, voxel_size=voxel_size)


# -- geometry of grains -----------------------------------------------------


def moments_of(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Barycentre and sample covariance (1/(k-1) normalisation) of points."""
    coords = np.asarray(coords, dtype=float)
    c = coords.mean(axis=0)
    k = len(coords)
    if k < 2:
        return c, np.zeros((3, 3))
    d = coords - c
    cov = d.T @ d / (k - 1)
    return c, 0.5 * (cov + cov.T)


def moments(gmap: GrainMap, i: int) -> GrainMoments:
    if not 1 <= i <= gmap.n:
        raise IndexError(f"grain index {i} outside 1..{gmap.n}")
    pts = gmap.grain_voxels(i)
    c, cov = moments_of(pts)
    return GrainMoments(i, len(pts), c, cov)


def all_moments(labels: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised volumes (n,), barycentres (n,3), covariances (n,3,3) for labels 1..n.

    Empty labels get zero volume, NaN barycentre and zero covariance.
    """
    flat = labels.ravel(order="F").astype(np.int64)
    coords = grid_coords(labels.shape)
    vol = np.bincount(flat, minlength=n + 1)[1:].astype(float)
    s1 = np.stack([np.bincount(flat, weights=coords[:, a], minlength=n + 1)[1:] for a in range(3)], 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        bary = s1 / vol[:, None]
    cov = np.zeros((n, 3, 3))
    centred = coords - np.nan_to_num(np.vstack([np.zeros(3), bary]))[flat]
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(flat, weights=centred[:, a] * centred[:, b], minlength=n + 1)[1:]
            with np.errstate(invalid="ignore", divide="ignore"):
                v = np.where(vol > 1, s / np.maximum(vol - 1, 1), 0.0)
            cov[:, a, b] = cov[:, b, a] = v
    return vol, bary, cov


def interface_voxels(gmap: GrainMap, i: int, j: int) -> np.ndarray:
    """Voxels whose 26-neighbourhood meets both grains; returned as (k, 3) coords."""
    return mask_coords(interface_mask(gmap.labels, i, j))


def interface_mask(labels: np.ndarray, i: int, j: int) -> np.ndarray:
    if i == j:
        raise ValueError("interface needs two distinct grains")
    near_i = ndimage.binary_dilation(labels == i, structure=N26, border_value=0)
    near_j = ndimage.binary_dilation(labels == j, structure=N26, border_value=0)
    return near_i & near_j


def boundary_mask(labels: np.ndarray, i: int) -> np.ndarray:
    """Voxels of label ``i`` with a face neighbour outside the label (or the window)."""
    inside = labels == i
    core = ndimage.binary_erosion(inside, structure=N6, border_value=0)
    return inside & ~core


def boundary_voxels_6(gmap: GrainMap, i: int) -> np.ndarray:
    if not 1 <= i <= gmap.n:
        raise IndexError(f"grain index {i} outside 1..{gmap.n}")
    return mask_coords(boundary_mask(gmap.labels, i))


def all_boundary_mask(labels: np.ndarray) -> np.ndarray:
    """True where a voxel differs from some face neighbour or touches the window border."""
    out = np.zeros(labels.shape, dtype=bool)
    for ax in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        diff = labels[tuple(lo)] != labels[tuple(hi)]
        out[tuple(lo)] |= diff
        out[tuple(hi)] |= diff
        first = [slice(None)] * 3
        last = [slice(None)] * 3
        first[ax] = 0
        last[ax] = -1
        out[tuple(first)] = True
        out[tuple(last)] = True
    return out


def adjacent_pairs(labels: np.ndarray) -> np.ndarray:
    """Unique pairs (a, b), a < b, a, b > 0, of labels in direct 26-contact."""
    labels = np.asarray(labels)
    codes = []
    big = np.int64(int(labels.max()) + 1)
    for off in _HALF_OFFSETS:
        src = []
        dst = []
        for ax, d in enumerate(off):
            n_ax = labels.shape[ax]
            if d == 1:
                src.append(slice(0, n_ax - 1))
                dst.append(slice(1, n_ax))
            elif d == -1:
                src.append(slice(1, n_ax))
                dst.append(slice(0, n_ax - 1))
            else:
                src.append(slice(None))
                dst.append(slice(None))
        a = labels[tuple(src)].astype(np.int64).ravel()
        b = labels[tuple(dst)].astype(np.int64).ravel()
        keep = (a != b) & (a > 0) & (b > 0)
        if keep.any():
            lo = np.minimum(a[keep], b[keep])
            hi = np.maximum(a[keep], b[keep])
            codes.append(np.unique(lo * big + hi))
    if not codes:
        return np.zeros((0, 2), dtype=np.int64)
    u = np.unique(np.concatenate(codes))
    return np.stack([u // big, u % big], axis=1)


def neighbor_sets(field_or_map, n: int | None = None) -> dict[int, set[int]]:
    """Label -> set of labels in direct 26-contact; background 0 is excluded."""
    labels = getattr(field_or_map, "labels", field_or_map)
    labels = np.asarray(labels)
    if n is None:
        n = getattr(field_or_map, "n", None) or int(labels.max())
    out = {i: set() for i in range(1, n + 1)}
    for a, b in adjacent_pairs(labels):
        out.setdefault(int(a), set()).add(int(b))
        out.setdefault(int(b), set()).add(int(a))
    return out


def interface_pairs(gmap: GrainMap) -> list[tuple[int, int]]:
    """Pairs (i < j) with a nonempty interface N_ij (26-contact or a one-voxel gap)."""
    labels = gmap.labels
    grown = [None] + [
        ndimage.binary_dilation(labels == i, structure=N26, border_value=0)
        for i in range(1, gmap.n + 1)
    ]
    pairs = []
    for i in range(1, gmap.n + 1):
        # any j with an overlapping dilation has a voxel within two steps of grain i
        reach = ndimage.binary_dilation(grown[i], structure=N26, border_value=0)
        for j in np.unique(labels[reach]):
            j = int(j)
            if j > i and (grown[i] & grown[j]).any():
                pairs.append((i, j))
    return pairs
