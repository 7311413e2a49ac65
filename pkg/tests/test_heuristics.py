import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tessfit.diagram import ModelKind, assign
from tessfit.grid import GrainMap, all_moments
from tessfit.heuristics import fit_h0, fit_hq, hq_weights, pca_matrix

from conftest import random_labels


def test_hq_laguerre_weight_is_squared_sphere_radius():
    # volume of a ball of radius r is 4/3 pi r^3, so w = r^2
    r = 2.5
    v = 4 / 3 * np.pi * r**3
    assert hq_weights([v], np.eye(3)[None]) == pytest.approx([r * r])


def test_hq_covariance_rule():
    cov = np.diag([4.0, 1.0, 0.25])
    M, floored = pca_matrix(cov)
    assert not floored
    assert np.allclose(M, np.diag([0.25, 1.0, 4.0]))
    v = 10.0
    want = (3 * v / (4 * np.pi * np.sqrt(np.linalg.det(cov)))) ** (2 / 3)
    assert hq_weights([v], M[None]) == pytest.approx([want])


def test_pca_matrix_floors_flat_grain():
    M, floored = pca_matrix(np.diag([1.0, 1.0, 0.0]))
    assert floored
    assert np.all(np.isfinite(M)) and np.linalg.eigvalsh(M).min() > 0


@given(st.integers(0, 2**31), st.sampled_from(list(ModelKind)))
def test_h0_sites_are_barycentres(seed, kind):
    rng = np.random.default_rng(seed)
    g = GrainMap(random_labels(rng, (4, 4, 4), 3), 3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        t = fit_h0(g, kind)
    _, bary, _ = all_moments(g.labels, 3)
    assert np.allclose(t.sites, bary)
    assert np.all(t.weights == 0)
    if kind is ModelKind.DGBPD:
        assert np.allclose(t.matrices, np.stack([np.diag(np.diag(m)) for m in t.matrices]))


def test_hq_rejects_voronoi():
    g = GrainMap(np.array([1, 1, 2, 2]).reshape(4, 1, 1), 2)
    with pytest.raises(ValueError):
        fit_hq(g, "voronoi")


def test_flat_grain_floor_recorded():
    lab = np.ones((4, 4, 1), int)
    lab[2:] = 2
    events = []
    with pytest.warns(RuntimeWarning):
        fit_hq(GrainMap(lab, 2), "gbpd", events)
    assert events and events[0]["event"] == "eigenvalue_floor"


def test_two_equal_grains_recover_split():
    lab = np.ones((10, 1, 1), int)
    lab[5:] = 2
    g = GrainMap(lab, 2)
    for kind in ("voronoi", "laguerre"):
        t = fit_h0(g, kind) if kind == "voronoi" else fit_hq(g, kind)
        assert np.array_equal(assign(t).labels, g.labels)
