import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tessfit.diagram import ModelKind, Tessellation, assign, power_distance
from tessfit.gdfit import (
    CLAMP,
    GDConfig,
    GDParams,
    distance_vector,
    fit_gd,
    gradient_params,
    gradient_soft,
    hard_accuracy,
    objective_params,
    objective_soft,
    soft_assignment,
)
from tessfit.grid import GrainMap, grid_coords
from tessfit.synth import SynthSpec, generate

from test_diagram import random_tess


def scalar_objective(gmap, tess, tau):
    """Term-by-term reimplementation of the clamped binary log-likelihood."""
    total, count = 0.0, 0
    gens = tess.generators
    for x, y, z in np.ndindex(gmap.dims):
        gt = gmap.labels[x, y, z]
        if gt == 0:
            continue
        D = [power_distance(g, (x, y, z)) for g in gens]
        e = [np.exp(-(d - min(D)) / tau) for d in D]
        for i, ei in enumerate(e):
            p = min(max(ei / sum(e), CLAMP), 1 - CLAMP)
            total += np.log(p) if gt == i + 1 else np.log(1 - p)
        count += 1
    return total / count


def test_distance_vector_matches_power_distance():
    t = random_tess(np.random.default_rng(1), 4, "gbpd")
    y = np.array([1.5, 2.0, 0.5])
    assert np.allclose(distance_vector(y, t), [power_distance(g, y) for g in t.generators])


def test_distance_vector_equidistant():
    t = Tessellation.isotropic([[0, 0, 0], [2, 0, 0]])
    d = distance_vector([1, 5, 0], t)
    assert d[0] == d[1]


def test_soft_assignment_examples():
    t = Tessellation.isotropic([[0, 0, 0], [2, 0, 0]])
    assert np.allclose(soft_assignment([1, 0, 0], t, 1.0), [0.5, 0.5])
    t = Tessellation.isotropic([[0, 0, 0], [0, 0, 0]], [0.0, -1e6])
    assert np.allclose(soft_assignment([0, 0, 0], t, 1.0), [1, 0])
    with pytest.raises(ValueError):
        soft_assignment([0, 0, 0], t, 0.0)


@pytest.mark.parametrize("kind", ["laguerre", "gbpd"])
def test_soft_assignment_tends_to_argmin(kind):
    rng = np.random.default_rng(3)
    t = random_tess(rng, 5, kind)
    Y = rng.uniform(0, 5, (200, 3))
    D = distance_vector(Y, t)
    srt = np.sort(D, axis=1)
    clear = srt[:, 1] - srt[:, 0] > 0.5
    for tau in (1.0, 0.1, 0.01):
        P = soft_assignment(Y, t, tau)
        assert np.allclose(P.sum(axis=1), 1)
    P = soft_assignment(Y, t, 0.01)
    assert np.array_equal(P[clear].argmax(1), D[clear].argmin(1))
    assert np.all(P[clear].max(1) > 1 - 1e-12)


def test_objective_terms():
    # a voxel fully in its cell contributes log(1) = 0; at p = 0.5 both terms give log 0.5
    g = GrainMap(np.array([1, 1, 2, 2]).reshape(4, 1, 1), 2)
    t = Tessellation.isotropic([[0, 0, 0], [0, 0, 0]], dims=(4, 1, 1))
    assert objective_soft(g, t, 1.0) == pytest.approx(2 * np.log(0.5))
    t = Tessellation.isotropic([[-48.5, 0, 0], [51.5, 0, 0]], dims=(4, 1, 1))
    assert objective_soft(g, t, 1.0) == pytest.approx(2 * np.log(1 - CLAMP), abs=1e-12)


@given(st.integers(0, 2**31), st.sampled_from(list(ModelKind)))
@settings(max_examples=10)
def test_objective_matches_scalar_route(seed, kind):
    rng = np.random.default_rng(seed)
    t = random_tess(rng, 3, kind.value, dims=(4, 3, 3))
    lab = rng.integers(0, 4, size=(4, 3, 3))
    lab.ravel()[:6] = [1, 1, 2, 2, 3, 3]
    g = GrainMap(lab, 3)
    tau = float(rng.uniform(0.5, 5))
    assert objective_soft(g, t, tau) == pytest.approx(scalar_objective(g, t, tau), rel=1e-10)
    assert objective_soft(g, t, tau) <= 0


def test_symmetric_pair_gradients():
    lab = np.ones((6, 1, 1), int)
    lab[3:] = 2
    g = GrainMap(lab, 2)
    t = Tessellation.isotropic([[1, 0, 0], [4, 0, 0]], [1.0, 1.0], dims=(6, 1, 1))
    gr = gradient_soft(g, t, 2.0)
    assert np.allclose(gr["sites"][0], -gr["sites"][1])
    assert gr["weights"][0] == pytest.approx(-gr["weights"][1])


def test_voronoi_freezes_weights_and_matrices():
    rng = np.random.default_rng(0)
    t = random_tess(rng, 3, "voronoi", dims=(4, 4, 4))
    lab = rng.integers(1, 4, size=(4, 4, 4))
    lab.ravel()[:6] = [1, 1, 2, 2, 3, 3]
    g = GrainMap(lab, 3)
    gr = gradient_soft(g, t, 1.0)
    assert np.all(gr["weights"] == 0) and np.all(gr["logdiag"] == 0) and np.all(gr["off"] == 0)
    P = GDParams.from_tessellation(t)
    assert P.vector().size == 9


def finite_difference_check(P, g, tau):
    v = P.vector()
    grad = gradient_params(P, g, tau)
    worst = 0.0
    for a in range(v.size):
        h = 1e-4 * max(1.0, abs(v[a]))
        vp, vm = v.copy(), v.copy()
        vp[a] += h
        vm[a] -= h
        fd = (objective_params(P.with_vector(vp), g, tau) - objective_params(P.with_vector(vm), g, tau)) / (2 * h)
        worst = max(worst, abs(grad[a] - fd) / max(abs(grad[a]), abs(fd), 1e-8))
    return worst


@given(st.integers(0, 2**31), st.sampled_from(list(ModelKind)))
@settings(max_examples=12)
def test_gradient_matches_finite_differences(seed, kind):
    rng = np.random.default_rng(seed)
    t = random_tess(rng, 3, kind.value, dims=(5, 4, 4))
    lab = rng.integers(1, 4, size=(5, 4, 4))
    lab.ravel()[:6] = [1, 1, 2, 2, 3, 3]
    g = GrainMap(lab, 3)
    assert finite_difference_check(GDParams.from_tessellation(t), g, 3.0) < 1e-4


def test_params_round_trip():
    t = random_tess(np.random.default_rng(2), 4, "gbpd")
    P = GDParams.from_tessellation(t)
    assert np.allclose(P.matrices(), t.matrices)
    assert np.array_equal(P.with_vector(P.vector()).vector(), P.vector())


def test_fit_from_optimal_init_does_not_lose_accuracy():
    tess, g = generate(SynthSpec(dims=(14, 14, 14), n=5, seed=1))
    before = hard_accuracy(g, tess)
    fit, _ = fit_gd(g, "laguerre", GDConfig(max_epochs=5, tau=0.5), init=tess)
    assert hard_accuracy(g, fit) >= before


def test_two_cell_voronoi_recovers_bisector():
    lab = np.ones((12, 6, 6), int)
    lab[7:] = 2
    g = GrainMap(lab, 2)
    init = Tessellation.isotropic([[2.0, 2.5, 2.5], [8.0, 2.5, 2.5]], kind="voronoi", dims=g.dims)
    assert hard_accuracy(g, init) < 1
    fit, _ = fit_gd(g, "voronoi", GDConfig(max_epochs=25), init=init)
    a, b = fit.sites
    # crossing point of the bisector with the x axis through the grain centres
    mid = (b[0] ** 2 - a[0] ** 2 + (b[1:] - a[1:]) @ (b[1:] + a[1:] - 2 * 2.5)) / (2 * (b[0] - a[0]))
    assert abs(mid - 6.5) <= 0.5
    assert hard_accuracy(g, fit) == 1.0


def test_fit_is_deterministic():
    _, g = generate(SynthSpec(dims=(12, 12, 12), n=4, seed=2))
    a = fit_gd(g, "gbpd", GDConfig(max_epochs=3, batch_size=512, seed=5))
    b = fit_gd(g, "gbpd", GDConfig(max_epochs=3, batch_size=512, seed=5))
    assert a[0].dumps() == b[0].dumps()
    assert a[1].to_csv() == b[1].to_csv()


def test_best_trace_non_decreasing():
    _, g = generate(SynthSpec(dims=(12, 12, 12), n=4, seed=2))
    _, tr = fit_gd(g, "laguerre", GDConfig(max_epochs=4))
    assert np.all(np.diff(tr.best) >= 0)


def test_config_validation():
    with pytest.raises(ValueError):
        GDConfig(tau=-1.0)
    with pytest.raises(ValueError):
        GDConfig(lr_sites=0)
