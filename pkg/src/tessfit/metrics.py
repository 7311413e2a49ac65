"""Discrepancy measures between a grain map and a discretised tessellation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagram import EIG_FLOOR, LabelField
from .grid import GrainMap, all_moments, neighbor_sets

COLUMNS = ("F_c", "F_0", "F_phi_d", "F_phi_A", "F_elo", "F_flat", "F_IoU")
DESCRIPTORS = ("phi_d", "phi_A", "phi_elo", "phi_flat")


class MetricError(ValueError):
    pass


def _labels(obj) -> np.ndarray:
    return np.asarray(getattr(obj, "labels", obj))


def _check_dims(gmap: GrainMap, fld) -> None:
    if tuple(_labels(fld).shape) != gmap.dims:
        raise MetricError(f"dims differ: map {gmap.dims}, field {tuple(_labels(fld).shape)}")


def f_correct(gmap: GrainMap, fld) -> float:
    """Fraction of foreground voxels whose fitted label equals the GT label."""
    _check_dims(gmap, fld)
    gt = gmap.labels
    fg = gt > 0
    total = int(fg.sum())
    if total == 0:
        raise MetricError("no foreground voxels")
    return float(np.count_nonzero(_labels(fld)[fg] == gt[fg]) / total)


def f_missing(fld, n: int) -> float:
    counts = np.bincount(_labels(fld).ravel().astype(np.int64), minlength=n + 1)[1 : n + 1]
    return float(np.count_nonzero(counts == 0) / n)


@dataclass(frozen=True)
class CellDescriptors:
    """Per-label arrays (index 0 is label 1); NaN for empty labels."""

    phi_d: np.ndarray
    phi_A: np.ndarray
    phi_elo: np.ndarray
    phi_flat: np.ndarray
    volume: np.ndarray

    def get(self, name: str) -> np.ndarray:
        return getattr(self, name)


def exposed_faces(labels: np.ndarray, n: int) -> np.ndarray:
    """Number of voxel faces of each label that touch another label or the window border."""
    labels = np.asarray(labels).astype(np.int64)
    out = np.zeros(n + 1)
    for ax in range(3):
        a = np.moveaxis(labels, ax, 0)
        diff = a[1:] != a[:-1]
        out += np.bincount(a[1:][diff], minlength=n + 1)[: n + 1]
        out += np.bincount(a[:-1][diff], minlength=n + 1)[: n + 1]
        out += np.bincount(a[0].ravel(), minlength=n + 1)[: n + 1]
        out += np.bincount(a[-1].ravel(), minlength=n + 1)[: n + 1]
    return out[1:]


def half_axis_ratios(cov: np.ndarray, floor: float = EIG_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Elongation a2/a1 and flatness a3/a2 from covariance eigenvalues (descending, floored)."""
    lam = np.linalg.eigvalsh(0.5 * (cov + np.swapaxes(cov, -1, -2)))[..., ::-1]
    a = np.sqrt(np.maximum(lam, floor))
    return a[..., 1] / a[..., 0], a[..., 2] / a[..., 1]


def cell_descriptors(labels, n: int) -> CellDescriptors:
    labels = _labels(labels)
    vol, _, cov = all_moments(labels, n)
    with np.errstate(invalid="ignore"):
        phi_d = np.cbrt(6.0 * vol / np.pi)
    area = exposed_faces(labels, n)
    elo, flat = half_axis_ratios(cov)
    empty = vol == 0
    nan = np.where(empty, np.nan, 1.0)
    return CellDescriptors(phi_d * nan, area * nan, elo * nan, flat * nan, vol)


def descriptors(voxels) -> dict[str, float]:
    """Descriptors of a single voxel set given as (k, 3) integer coordinates."""
    pts = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    if len(pts) == 0:
        raise MetricError("empty cell")
    lo = pts.min(axis=0)
    box = np.zeros(tuple(pts.max(axis=0) - lo + 1), dtype=np.int64)
    box[tuple((pts - lo).T)] = 1
    # faces on the bounding box edge are exposed either way, so the box is enough
    d = cell_descriptors(box, 1)
    return {k: float(d.get(k)[0]) for k in DESCRIPTORS}


def f_descriptor(gmap: GrainMap, fld, phi: str, gt_desc: CellDescriptors | None = None,
                 fit_desc: CellDescriptors | None = None) -> float:
    """Mean absolute descriptor error over non-missing cells, normalised by the GT mean."""
    if phi not in DESCRIPTORS:
        raise MetricError(f"unknown descriptor {phi!r}; choose from {DESCRIPTORS}")
    _check_dims(gmap, fld)
    n = gmap.n
    gt_desc = gt_desc or cell_descriptors(gmap.labels, n)
    fit_desc = fit_desc or cell_descriptors(_labels(fld), n)
    g = gt_desc.get(phi)
    f = fit_desc.get(phi)
    present = fit_desc.volume > 0
    if not present.any():
        raise MetricError("every cell is missing")
    mean = float(np.mean(g))
    if not np.isfinite(mean) or mean == 0:
        raise MetricError(f"mean GT {phi} is {mean}")
    return float(np.abs(g[present] - f[present]).sum() / (present.sum() * mean))


def iou(a: set, b: set) -> float:
    union = a | b
    return 1.0 if not union else len(a & b) / len(union)


def f_iou(gmap: GrainMap, fld) -> float:
    _check_dims(gmap, fld)
    n = gmap.n
    lab = _labels(fld)
    counts = np.bincount(lab.ravel().astype(np.int64), minlength=n + 1)[1 : n + 1]
    present = [i for i in range(1, n + 1) if counts[i - 1] > 0]
    if not present:
        return 0.0
    ngt = neighbor_sets(gmap.labels, n)
    nfit = neighbor_sets(lab, max(n, int(lab.max())))
    return float(np.mean([iou(ngt[i], nfit.get(i, set())) for i in present]))


def evaluate(gmap: GrainMap, fld) -> dict[str, float]:
    """All measures for one (map, field) pair, keyed by COLUMNS."""
    n = gmap.n
    lab = _labels(fld)
    gt_desc = cell_descriptors(gmap.labels, n)
    fit_desc = cell_descriptors(lab, n)
    out = {"F_c": f_correct(gmap, lab), "F_0": f_missing(lab, n)}
    for col, phi in zip(COLUMNS[2:6], DESCRIPTORS):
        out[col] = f_descriptor(gmap, lab, phi, gt_desc, fit_desc)
    out["F_IoU"] = f_iou(gmap, lab)
    return out


# -- tables -------------------------------------------------------------------


@dataclass
class MetricTable:
    rows: list[dict] = field(default_factory=list)

    def add(self, dataset: str, method: str, model: str, values: dict) -> None:
        vals = {c: float(values[c]) for c in COLUMNS}
        bad = [c for c, v in vals.items() if not np.isfinite(v)]
        if bad:
            raise MetricError(f"non-finite metrics {bad}")
        self.rows.append({"dataset": dataset, "method": method, "model": model, **vals})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "method", "model", *COLUMNS])
        for r in self.rows:
            w.writerow([r["dataset"], r["method"], r["model"], *(f"{r[c]:.6f}" for c in COLUMNS)])
        return buf.getvalue()

    def to_text(self) -> str:
        head = ["dataset", "method", "model", *COLUMNS]
        body = [[r["dataset"], r["method"], r["model"], *(f"{r[c]:.3f}" for c in COLUMNS)] for r in self.rows]
        widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
        lines = ["  ".join(str(x).ljust(wd) for x, wd in zip(line, widths)).rstrip() for line in [head, *body]]
        return "\n".join(lines) + "\n"

    def save(self, path) -> tuple[Path, Path]:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        csv_path = path.with_suffix(".csv")
        txt_path = path.with_suffix(".txt")
        csv_path.write_text(self.to_csv())
        txt_path.write_text(self.to_text())
        return csv_path, txt_path

    @classmethod
    def from_csv(cls, text: str) -> "MetricTable":
        t = cls()
        for r in csv.DictReader(io.StringIO(text)):
            t.rows.append({**r, **{c: float(r[c]) for c in COLUMNS}})
        return t
