"""Synthetic ground truth: Poisson (or fixed-count) generators with random marks."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .diagram import LabelField, ModelKind, Tessellation, assign
from .grid import GrainMap

MAX_ATTEMPTS = 20


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic grain map.

    Mark sizes are given relative to the mean generator spacing
    ``(volume / count) ** (1/3)``, so the 2D proportions of the classical
    example (intensity 100 in the unit square, disc radii in [0.025, 0.075])
    become ``radius_range=(0.25, 0.75)``. Laguerre weights are squared radii.
    """

    dims: tuple[int, int, int] = (32, 32, 32)
    kind: ModelKind = ModelKind.LAGUERRE
    n: int | None = 10
    intensity: float | None = None  # generators per voxel volume; used when n is None
    radius_range: tuple[float, float] = (0.25, 0.75)
    half_axes: tuple[tuple[float, float], ...] = ((0.25, 0.35), (0.25, 0.35), (0.25, 0.35))
    gbpd_weight_range: tuple[float, float] = (0.5, 1.5)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind.parse(self.kind))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        lo, hi = self.radius_range
        if lo > hi or self.gbpd_weight_range[0] > self.gbpd_weight_range[1]:
            raise ValueError("mark ranges need lo <= hi")
        for a, b in self.half_axes:
            if a <= 0 or b < a:
                raise ValueError("half-axis ranges must be positive with lo <= hi")
        if self.expected_count < 2:
            raise ValueError(f"expected generator count {self.expected_count:g} < 2")

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims))

    @property
    def expected_count(self) -> float:
        if self.n is not None:
            return float(self.n)
        if self.intensity is None:
            raise ValueError("need n or intensity")
        return self.intensity * self.volume


def anisotropize(spec: SynthSpec, ratio: float = 3.0) -> SynthSpec:
    """GBPD spec whose long half-axis is at least ``ratio`` times every short one.

    The long range is the short range scaled so that its lower end is
    ``ratio`` times the upper end of the short range.
    """
    lo, hi = spec.half_axes[-1]
    scale = ratio * hi / lo
    axes = ((lo * scale, hi * scale), (lo, hi), (lo, hi))
    return replace(spec, kind=ModelKind.GBPD, half_axes=axes)


def _marks(spec: SynthSpec, count: int, spacing: float, rng: np.random.Generator):
    kind = spec.kind
    eye = np.broadcast_to(np.eye(3), (count, 3, 3)).copy()
    if kind is ModelKind.VORONOI:
        return np.zeros(count), eye
    if kind is ModelKind.LAGUERRE:
        r = rng.uniform(*spec.radius_range, size=count) * spacing
        return r * r, eye
    axes = np.stack([rng.uniform(lo, hi, size=count) for lo, hi in spec.half_axes], axis=1) * spacing
    w = rng.uniform(*spec.gbpd_weight_range, size=count)
    if kind is ModelKind.DGBPD:
        perm = np.argsort(rng.random((count, 3)), axis=1)
        axes = np.take_along_axis(axes, perm, axis=1)
        return w, np.stack([np.diag(1.0 / a**2) for a in axes])
    rots = Rotation.random(count, random_state=rng).as_matrix()
    mats = np.einsum("nij,nj,nkj->nik", rots, 1.0 / axes**2, rots)
    return w, 0.5 * (mats + np.swapaxes(mats, 1, 2))


def generate(spec: SynthSpec) -> tuple[Tessellation, GrainMap]:
    """Draw generators, discretise, drop empty cells and relabel.

    Draws in which some cell covers exactly one voxel are rejected and redrawn.
    """
    rng = np.random.default_rng(spec.seed)
    dims = np.array(spec.dims, float)
    for _ in range(MAX_ATTEMPTS):
        count = spec.n if spec.n is not None else int(rng.poisson(spec.expected_count))
        if count < 2:
            continue
        spacing = (spec.volume / count) ** (1 / 3)
        sites = rng.uniform(-0.5, dims - 0.5, size=(count, 3))
        w, mats = _marks(spec, count, spacing, rng)
        tess = Tessellation(sites, w, mats, spec.kind, spec.dims)
        field = assign(tess)
        sizes = np.bincount(field.labels.ravel(), minlength=count + 1)[1:]
        if np.any(sizes == 1):
            continue
        keep = np.flatnonzero(sizes > 0)
        if len(keep) < 2:
            continue
        relabel = np.zeros(count + 1, dtype=np.int64)
        relabel[keep + 1] = np.arange(1, len(keep) + 1)
        labels = relabel[field.labels.astype(np.int64)]
        kept = Tessellation(sites[keep], w[keep], mats[keep], spec.kind, spec.dims)
        return kept, GrainMap(labels, n=len(keep))
    raise SynthError(f"no valid draw in {MAX_ATTEMPTS} attempts")


def identity_field(gmap: GrainMap) -> LabelField:
    return LabelField(gmap.labels.copy(), gmap.n)
