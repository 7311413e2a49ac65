import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tessfit.diagram import LabelField, Tessellation, assign
from tessfit.grid import GrainMap, boundary_mask
from tessfit.neperfit import (
    NeperConfig,
    _deltas_sq,
    BoundaryData,
    cell_delta,
    fit_neper,
    objective_neper,
    subplex,
)
from tessfit.synth import SynthSpec, generate


def brute_delta_sq(gmap, labels, sites):
    """Exhaustive nearest-voxel search for every GT boundary voxel."""
    out = []
    for i in range(1, gmap.n + 1):
        bd = np.argwhere(boundary_mask(gmap.labels, i))
        cell = np.argwhere(labels == i)
        if len(cell) == 0:
            out.append(float(np.sum((bd - sites[i - 1]) ** 2)))
            continue
        d2 = ((bd[:, None, :] - cell[None, :, :]) ** 2).sum(-1).min(axis=1)
        out.append(float(d2.sum()))
    return np.array(out)


def scalar_objective(gmap, labels, sites):
    dsq = brute_delta_sq(gmap, labels, sites)
    vol = gmap.volumes()[1:]
    dbar = np.mean((6 * vol / np.pi) ** (1 / 3))
    total = sum(int(boundary_mask(gmap.labels, i).sum()) for i in range(1, gmap.n + 1))
    return 2.0 / (dbar * total) * np.sqrt(dsq.sum())


def test_perfect_fit_is_zero():
    tess, g = generate(SynthSpec(dims=(12, 12, 12), n=4, seed=0))
    assert objective_neper(g, tess) == 0
    assert all(cell_delta(g, tess, i) == 0 for i in range(1, g.n + 1))


def test_single_voxel_at_distance_two():
    # GT grain 1 is x < 4 and grain 2 is x >= 4; the fitted cell 1 stops at x = 1
    lab = np.ones((8, 1, 1), int)
    lab[4:] = 2
    g = GrainMap(lab, 2)
    t = Tessellation.isotropic([[0, 0, 0], [3, 0, 0]], dims=g.dims, kind="voronoi")
    field = assign(t)
    assert field.labels[:, 0, 0].tolist() == [1, 1, 2, 2, 2, 2, 2, 2]
    # GT boundary of grain 1 is every voxel (1-voxel-thin window); misassigned are x = 2, 3
    assert cell_delta(g, t, 1, field) == pytest.approx(np.sqrt(1 + 4))


@given(st.integers(0, 2**31))
@settings(max_examples=20)
def test_deltas_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    _, g = generate(SynthSpec(dims=(9, 8, 7), n=4, seed=int(rng.integers(1000))))
    sites = rng.uniform(0, 8, (g.n, 3))
    t = Tessellation.isotropic(sites, rng.uniform(0, 6, g.n), dims=g.dims)
    lab = assign(t).labels
    got = _deltas_sq(BoundaryData(g), t, lab)
    assert np.allclose(got, brute_delta_sq(g, lab, sites))
    assert objective_neper(g, t) == pytest.approx(scalar_objective(g, lab, sites))


def test_empty_cell_uses_site_distance():
    lab = np.ones((6, 2, 2), int)
    lab[3:] = 2
    g = GrainMap(lab, 2)
    t = Tessellation.isotropic([[1, 0.5, 0.5], [4, 0.5, 0.5]], [0.0, -100.0], dims=g.dims)
    assert (assign(t).labels == 2).sum() == 0
    want = brute_delta_sq(g, assign(t).labels, t.sites)[1]
    assert cell_delta(g, t, 2) == pytest.approx(np.sqrt(want))


def test_objective_is_homogeneous():
    # O is linear in the root of the summed squares, so doubling every delta doubles O
    _, g = generate(SynthSpec(dims=(10, 10, 10), n=3, seed=4))
    t = Tessellation.isotropic(np.array([[2, 2, 2], [7, 7, 7], [2, 7, 5]], float), dims=g.dims)
    bd = BoundaryData(g)
    dsq = _deltas_sq(bd, t, assign(t).labels)
    o = objective_neper(g, t, data=bd)
    assert o == pytest.approx(2.0 / (bd.mean_diameter * bd.total) * np.sqrt(dsq.sum()))
    assert 2.0 / (bd.mean_diameter * bd.total) * np.sqrt((4 * dsq).sum()) == pytest.approx(2 * o)


def test_subplex_minimises_quadratic():
    target = np.arange(7, dtype=float)
    f = lambda x: float(np.sum((x - target) ** 2))
    x, fx, tr = subplex(f, np.zeros(7), np.ones(7), max_evals=5000, window=400, stop_abs=1e-10)
    assert fx < 1e-6
    assert np.all(np.diff(tr.best) <= 0)


def test_subplex_stop_rule():
    f = lambda x: 1.0
    _, _, tr = subplex(f, np.zeros(3), np.ones(3), window=30, stop_abs=1e-3)
    assert len(tr.evaluation) == 31
    assert "below" in tr.stop_reason


def test_zero_objective_init_returned_unchanged():
    tess, g = generate(SynthSpec(dims=(12, 12, 12), n=3, seed=2))
    fit, tr = fit_neper(g, "laguerre", init=tess)
    assert tr.best[-1] == 0
    assert np.allclose(fit.sites, tess.sites)
    assert len(tr.evaluation) == 40 * g.n + 1


def test_perturbed_init_improves():
    tess, g = generate(SynthSpec(dims=(14, 14, 14), n=3, seed=3))
    rng = np.random.default_rng(0)
    init = Tessellation(tess.sites + rng.normal(0, 1.5, (g.n, 3)), tess.weights, tess.matrices, "laguerre", g.dims)
    o0 = objective_neper(g, init)
    fit, tr = fit_neper(g, "laguerre", init=init)
    assert tr.objective[0] == pytest.approx(o0)
    assert objective_neper(g, fit) < o0
    assert np.all(np.diff(tr.best) <= 0)


def test_deterministic_and_kind_check():
    _, g = generate(SynthSpec(dims=(10, 10, 10), n=3, seed=5))
    cfg = NeperConfig(max_evals=200)
    a = fit_neper(g, "voronoi", cfg)
    b = fit_neper(g, "voronoi", cfg)
    assert a[0].dumps() == b[0].dumps() and a[1].to_csv() == b[1].to_csv()
    assert np.all(a[0].weights == 0)
    with pytest.raises(ValueError):
        fit_neper(g, "gbpd")
