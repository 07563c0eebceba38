import csv

import numpy as np
import pytest

from efg3d.approx import ApproxParams
from efg3d.cloud import NodeCloud
from efg3d.errors import DataError
from efg3d.material import MaterialParams, principal_cauchy_uniaxial
from efg3d.verify import (
    CUBE_TABLE2, OracleError, analytical_cube_displacement, bc_audit, error_norms, midplane_check,
    reconstruct, solve_uniaxial_J, uniaxial_residual, write_report,
)


def brute_force_J(stretch, params, lo=0.9, hi=1.1, step=1e-7):
    # exhaustive scan for the residual sign change
    J = np.arange(lo, hi, step)
    r = uniaxial_residual(J, stretch, params)
    k = np.flatnonzero(np.sign(r[:-1]) != np.sign(r[1:]))[0]
    return 0.5 * (J[k] + J[k + 1])


def test_unit_stretch_gives_unit_J(soft):
    assert solve_uniaxial_J(1.0, soft).J == pytest.approx(1.0, abs=1e-12)


def test_root_matches_scan(soft):
    sol = solve_uniaxial_J(0.8, soft)
    assert abs(sol.J - brute_force_J(0.8, soft)) < 1e-6
    assert abs(uniaxial_residual(sol.J, 0.8, soft)) < 1e-12 * soft.mu
    assert sol.lateral_stretch ** 2 * sol.stretch == pytest.approx(sol.J, rel=1e-14)


def test_incompressible_limit_is_monotone():
    Js = [solve_uniaxial_J(0.8, MaterialParams(3000, nu, 1000)).J for nu in (0.3, 0.45, 0.49, 0.499, 0.499999)]
    assert all(abs(b - 1) < abs(a - 1) for a, b in zip(Js, Js[1:]))
    assert abs(Js[-1] - 1) < 1e-4


def test_oracle_consistency(soft):
    for lam in (0.5, 0.8, 1.2, 2.0):
        sol = solve_uniaxial_J(lam, soft)
        s11, _ = principal_cauchy_uniaxial(lam, sol.J, soft)
        assert abs(s11) < 1e-10 * soft.mu


def test_bracket_without_sign_change(soft):
    with pytest.raises(OracleError):
        solve_uniaxial_J(0.8, soft, bracket=(2.0, 3.0))


def test_analytical_field(soft):
    X = np.array([[0.0, 0.0, 0.0], [0.1, 0.1, 0.1], [0.05, 0.0, 0.1]])
    u = analytical_cube_displacement(X, 0.8, params=soft)
    assert np.array_equal(u[0], np.zeros(3))
    assert u[1, 2] == pytest.approx(-0.02, rel=1e-14)
    # antisymmetry about the lateral scaling centre
    c = analytical_cube_displacement(np.array([[0.06, 0.05, 0], [0.04, 0.05, 0]]), 0.8, params=soft,
                                     center=(0.05, 0.05))
    assert np.allclose(c[0, :2], -c[1, :2]) and c[0, 0] > 0


def test_error_norms_basic():
    ref = np.linspace(0, 1, 11)[:, None] * np.ones((1, 3))
    rep = error_norms(ref, ref)
    assert all(e.linf == 0 and e.nrmse == 0 for e in rep.components.values())
    rep = error_norms(ref + 1e-4, ref)
    for e in rep.components.values():
        assert e.linf == pytest.approx(1e-4)
        assert e.nrmse == pytest.approx(1e-4)
        assert e.nrmse_paper == pytest.approx(np.sqrt(11 * 1e-8) / 11)


def test_error_norms_zero_range_flag():
    ref = np.zeros((5, 3))
    ref[:, 2] = np.arange(5)
    rep = error_norms(ref + 0.1, ref)
    assert not rep.components["x"].normalized
    rows = {(r[2], r[3]): r[4] for r in rep.rows("b", "g")}
    assert rows[("x", "RMSE_unnormalized")] == pytest.approx(0.1)
    assert ("x", "L_NRMSE") not in rows and ("z", "L_NRMSE") in rows


def test_bc_audit_on_linear_field(cube6):
    cloud, _ = cube6
    u = 0.01 * cloud.coords @ np.array([[1, 0.2, 0], [0, 1, 0.1], [0.3, 0, -1.0]])
    audit = bc_audit(cloud, u, {"top": (cloud.node_sets["top"], (False, False, True)),
                                "xmin": (cloud.node_sets["xmin"], (True, False, False))})
    for linf, l2 in audit.planes.values():
        assert linf < 1e-12 and l2 < 1e-13


def test_bc_audit_grows_with_eps(cube6, rng):
    cloud, _ = cube6
    u = 1e-3 * rng.standard_normal((len(cloud), 3))
    sets = {"top": (cloud.node_sets["top"], (True, True, True))}
    small = bc_audit(cloud, u, sets, ApproxParams(eps=1e-5)).planes["top"][0]
    large = bc_audit(cloud, u, sets, ApproxParams(eps=1e-3)).planes["top"][0]
    assert large >= 100 * small


def test_bc_audit_relabel_invariant(cube6, rng):
    cloud, _ = cube6
    u = 1e-3 * rng.standard_normal((len(cloud), 3))
    perm = rng.permutation(len(cloud))
    inv = np.argsort(perm)
    c2 = NodeCloud(cloud.coords[perm])
    top = cloud.node_sets["top"]
    a = bc_audit(cloud, u, {"t": (top, (1, 1, 1))}).planes["t"]
    b = bc_audit(c2, u[perm], {"t": (inv[top], (1, 1, 1))}).planes["t"]
    assert a == pytest.approx(b, rel=1e-9, abs=1e-18)


def test_single_node_support_audit_is_zero():
    cloud = NodeCloud(np.array([[0.0, 0, 0], [10.0, 0, 0]]))
    p = ApproxParams(n_min=1, support_factor=0.5, max_gradient=0.0)
    u = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    audit = bc_audit(cloud, u, {"a": (np.array([0]), (1, 1, 1))}, p)
    assert audit.planes["a"] == (0.0, 0.0)
    assert np.array_equal(reconstruct(cloud, u, [0], p), u[:1])


def test_midplane_check(cylinder_coarse):
    cloud, _ = cylinder_coarse
    u = np.zeros((len(cloud), 3))
    u[:, 2] = -0.2 * cloud.coords[:, 2]
    mc = midplane_check(cloud, u, 0.1, -0.02)
    assert mc.target == -0.01 and mc.deviation < 1e-15 and mc.n_nodes > 0
    zero = midplane_check(cloud, np.zeros_like(u), 0.1, 0.0)
    assert zero.deviation == 0.0
    with pytest.raises(DataError):
        midplane_check(cloud, u, 0.1, -0.02, band=1e-9, base=0.013)


def test_report_layout(tmp_path):
    path = write_report([("cube-compression", "cloud1", "x", "Linf", 1.5e-5)], tmp_path / "r.csv")
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["benchmark", "grid", "component", "metric", "value"]
    assert rows[1][:4] == ["cube-compression", "cloud1", "x", "Linf"] and float(rows[1][4]) == 1.5e-5


def test_published_table_values():
    # cube compression, h = 0.02 and h = 0.01 rows
    assert CUBE_TABLE2[1]["Linf"] == (5.81e-5, 8.71e-5, 5.69e-5)
    assert CUBE_TABLE2[1]["L_NRMSE"] == (9.44e-4, 1.07e-3, 6.48e-4)
    assert CUBE_TABLE2[2]["Linf"] == (4.46e-5, 3.66e-5, 5.18e-5)
    assert CUBE_TABLE2[2]["L_NRMSE"] == (4.88e-4, 4.46e-4, 5.53e-4)
