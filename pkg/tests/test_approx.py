import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from efg3d.approx import (
    ApproxParams, basis_gradient, basis_values, constraint_matrix, gradient_check, interpolation_bound,
    kronecker_audit, shape_at_points, shape_batch, shape_mls, shape_mmls, support_for, weight_exponential,
    weight_regularized,
)
from efg3d.cloud import NodeCloud, SupportQueryResult, find_support, gauss_points
from efg3d.errors import SingularMomentError


def _mp_weight(r, rsd, eps):
    mpmath.mp.dps = 50
    s = (mpmath.mpf(r) / mpmath.mpf(rsd)) ** 2
    e = mpmath.mpf(eps)
    return ((s + e) ** -2 - (1 + e) ** -2) / (e ** -2 - (1 + e) ** -2)


def test_weight_endpoints():
    assert weight_regularized(0.0, 1.0) == 1.0
    assert weight_regularized(1.0, 1.0) == 0.0
    assert weight_regularized(1.5, 1.0) == 0.0


@pytest.mark.parametrize("frac", [0.5, 0.1, 0.9, 0.99])
def test_weight_matches_extended_precision(frac):
    ref = float(_mp_weight(frac * 0.02, 0.02, 1e-5))
    assert weight_regularized(frac * 0.02, 0.02, 1e-5) == pytest.approx(ref, rel=1e-14, abs=1e-300)


def test_weight_continuous_at_support_edge():
    assert weight_regularized(1 - 1e-12, 1.0) < 1e-10


def test_exponential_weight_endpoints():
    assert weight_exponential(0.0, 1.0) == pytest.approx(1.0)
    assert weight_exponential(1.0, 1.0) == 0.0


def test_basis_order_and_gradient():
    xi = np.array([0.2, -0.3, 0.5])
    p = basis_values(xi)
    x, y, z = xi
    assert np.allclose(p, [1, x, y, z, x * x, y * y, z * z, x * y, x * z, y * z])
    h = 1e-7
    fd = np.stack([(basis_values(xi + h * e) - basis_values(xi - h * e)) / (2 * h) for e in np.eye(3)], axis=-1)
    assert np.allclose(basis_gradient(xi), fd, atol=1e-8)


def test_constraint_matrix_blocks():
    H = constraint_matrix([1, 2, 3, 4, 5, 6])
    assert H.shape == (10, 10)
    assert np.all(H[:4] == 0) and np.all(H[:, :4] == 0)
    assert np.array_equal(np.diag(H)[4:], [1, 2, 3, 4, 5, 6])
    H2 = constraint_matrix([1, 2, 3], dim=2)
    assert H2.shape == (6, 6) and np.array_equal(np.diag(H2)[3:], [1, 2, 3])
    with pytest.raises(ValueError):
        constraint_matrix([-1, 0, 0, 0, 0, 0])


def test_tiny_eps_warns():
    with pytest.warns(RuntimeWarning):
        ApproxParams(eps=1e-9)


def _patch_cloud():
    g = np.linspace(0, 1, 4)
    X = np.array(np.meshgrid(g, g, g, indexing="ij")).reshape(3, -1).T
    return NodeCloud(X)


def test_partition_of_unity_and_linear_reproduction(rng):
    cloud = _patch_cloud()
    pts = rng.uniform(0.2, 0.8, size=(40, 3))
    b = shape_at_points(pts, cloud)
    ids = np.where(b.ids >= 0, b.ids, 0)
    assert np.abs(b.phi.sum(1) - 1).max() < 1e-10
    assert np.abs(np.einsum("nk,nkd->nd", b.phi, cloud.coords[ids]) - pts).max() < 1e-8
    # gradients of constant and linear fields
    assert np.abs(b.dphi.sum(1)).max() < 1e-8
    G = np.einsum("nkd,nke->nde", b.dphi, cloud.coords[ids])
    assert np.abs(G - np.eye(3)).max() < 1e-8


def test_mmls_matches_mls_without_penalty(rng):
    cloud = _patch_cloud()
    p0 = ApproxParams(mu_scale=0.0, max_gradient=0.0)
    for x in rng.uniform(0.3, 0.7, size=(5, 3)):
        sup = find_support(x, cloud, n_min=20)
        ev = shape_mmls(x, sup, cloud, p0)
        ids, phi = shape_mls(x, sup, cloud, p0)
        assert np.array_equal(ev.ids, ids)
        assert np.allclose(ev.phi, phi, rtol=1e-10, atol=1e-12)


def test_coplanar_support_needs_penalty():
    g = np.linspace(0, 1, 4)
    X = np.column_stack([np.repeat(g, 4), np.tile(g, 4), np.zeros(16)])
    cloud = NodeCloud(X)
    x = np.array([0.4, 0.5, 0.0])
    sup = SupportQueryResult(np.arange(16), 2.0)
    with pytest.raises(SingularMomentError):
        shape_mmls(x, sup, cloud, ApproxParams(mu_scale=0.0, max_gradient=0.0))
    ev = shape_mmls(x, sup, cloud, ApproxParams(mu_scale=1e-7, max_gradient=0.0))
    assert np.all(np.isfinite(ev.phi)) and np.all(np.isfinite(ev.dphi))
    assert abs(ev.phi.sum() - 1) < 1e-9


def test_single_node_support_is_exact():
    cloud = NodeCloud(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
    sup = SupportQueryResult(np.array([0]), 0.5)
    ev = shape_mmls(np.zeros(3), sup, cloud, ApproxParams(max_gradient=0.0))
    assert ev.phi.tolist() == [1.0]


def test_interpolation_at_node_within_bound(cube6):
    cloud, _ = cube6
    p = ApproxParams()
    j = 100
    x = cloud.coords[j]
    sup = support_for(x, cloud, p)
    ev = shape_mmls(x, sup, cloud, p)
    sup_pts = cloud.coords[ev.ids]
    d = np.linalg.norm(sup_pts[:, None] - sup_pts[None], axis=-1)
    r_min = d[np.triu_indices(len(sup_pts), 1)].min()
    dev = np.abs(ev.phi - (ev.ids == j)).max()
    # the bound describes the weight; the shape functions carry a modest factor on top
    bound = interpolation_bound(r_min, sup.r_sd, p.eps)
    assert 0 < dev <= 10 * bound


def test_kronecker_audit_cube_and_eps_growth(cube6):
    cloud, _ = cube6
    a5 = kronecker_audit(cloud, 50, ApproxParams(eps=1e-5), seed=1)
    a3 = kronecker_audit(cloud, 50, ApproxParams(eps=1e-3), seed=1)
    assert a5.worst_ratio <= 10
    assert a3.max_deviation > a5.max_deviation
    assert a3.max_deviation >= 100 * a5.max_deviation


@settings(max_examples=15, deadline=None)
@given(st.tuples(*[st.floats(0.01, 0.09)] * 3))
def test_gradient_check_cube(cube6, x):
    cloud, _ = cube6
    p = ApproxParams()
    assert gradient_check(np.array(x), support_for(x, cloud, p), cloud, p) < 1e-5


def test_gradient_check_cylinder_gauss_points(cylinder_coarse, rng):
    cloud, grid = cylinder_coarse
    gp = gauss_points(grid)
    p = ApproxParams()
    worst = max(gradient_check(gp.position[k], support_for(gp.position[k], cloud, p), cloud, p)
                for k in rng.choice(len(gp), 100, replace=False))
    assert worst < 1e-5


def test_quadratic_reproduction_on_interior_supports(cube6, rng):
    # full lattice supports are admissible; penalty degrades reproduction only slightly
    cloud, _ = cube6
    pts = rng.uniform(0.03, 0.07, size=(20, 3))
    b = shape_at_points(pts, cloud)
    ids = np.where(b.ids >= 0, b.ids, 0)
    q = basis_values(cloud.coords[ids])[..., 4:]
    approx = np.einsum("nk,nkm->nm", b.phi, q)
    exact = basis_values(pts)[:, 4:]
    assert np.abs(approx - exact).max() < 1e-4 * np.abs(exact).max()


def test_batch_is_deterministic(cube6, rng):
    cloud, _ = cube6
    pts = rng.uniform(0, 0.1, size=(50, 3))
    a = shape_at_points(pts, cloud)
    b = shape_at_points(pts, cloud)
    assert np.array_equal(a.phi, b.phi) and np.array_equal(a.dphi, b.dphi)


def test_shape_eval_csv(tmp_path, cube6):
    cloud, _ = cube6
    x = np.full(3, 0.05)
    ev = shape_mmls(x, support_for(x, cloud), cloud)
    ev.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "node_id,phi,dphidx,dphidy,dphidz"
    assert len(lines) == len(ev.ids) + 1
