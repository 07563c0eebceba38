import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from efg3d.cloud import (
    NodeCloud, find_support, find_supports, gauss_points, generate_cube_grid, generate_cylinder_grid,
    load_grid, load_model_dir, read_nodes, repair_orientation, save_grid, tet_volumes,
)
from efg3d.errors import DataError, ParseError, SupportError


def test_cube_counts_and_sets(cube6):
    cloud, grid = cube6
    assert len(cloud) == 216
    assert len(grid.cells) == 5 ** 3 * 6
    for name in ("xmin", "xmax", "ymin", "ymax", "bottom", "top"):
        assert len(cloud.node_sets[name]) == 36
    assert np.isclose(grid.total_volume(), 1e-3, rtol=1e-12)
    assert np.all(grid.volumes() > 0)


def test_cube_rejects_single_node_edge():
    with pytest.raises(ValueError):
        generate_cube_grid(0.1, 1)


def test_cylinder_volume_and_midplane(cylinder_coarse):
    cloud, grid = cylinder_coarse
    exact = np.pi * 0.05 ** 2 * 0.1
    # inscribed polygons lose a little volume
    assert 0.98 < grid.total_volume() / exact <= 1.0
    assert 900 <= len(cloud) <= 1500
    z = np.unique(np.round(cloud.coords[:, 2], 12))
    assert np.any(np.isclose(z, 0.05))


def test_gauss_quadrature_integrates_quadratics(cube6):
    # oracle: monomial integrals over the unit-scaled cube, exact for degree 2
    cloud, grid = cube6
    gp = gauss_points(grid)
    x, y, z = gp.position.T
    a = 0.1
    assert np.isclose(gp.weight.sum(), a ** 3, rtol=1e-13)
    assert np.isclose(np.sum(gp.weight * x * x), a ** 5 / 3, rtol=1e-12)
    assert np.isclose(np.sum(gp.weight * x * y), a ** 5 / 4, rtol=1e-12)
    assert np.isclose(np.sum(gp.weight * z), a ** 4 / 2, rtol=1e-12)


def test_repair_orientation_swaps_vertices():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    cells = np.array([[0, 2, 1, 3]])
    assert tet_volumes(v, cells)[0] < 0
    vol = repair_orientation(v, cells)
    assert np.isclose(vol[0], 1 / 6)
    assert tet_volumes(v, cells)[0] > 0


def _brute_support(x, coords, r):
    return np.flatnonzero(np.linalg.norm(coords - x, axis=1) <= r)


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.floats(-0.01, 0.11)] * 3))
def test_support_matches_brute_force(cube6, x):
    cloud, _ = cube6
    sup = find_support(np.array(x), cloud, n_min=10)
    ref = _brute_support(np.array(x), cloud.coords, sup.r_sd)
    assert set(sup.ids) == set(ref)
    inner = np.linalg.norm(cloud.coords[sup.ids] - np.array(x), axis=1) < sup.r_sd
    assert inner.sum() >= 10


def test_vectorised_supports_agree(cube6, rng):
    cloud, _ = cube6
    pts = rng.uniform(0, 0.1, size=(30, 3))
    ids, radii = find_supports(pts, cloud, n_min=10)
    for p, s, r in zip(pts, ids, radii):
        one = find_support(p, cloud, n_min=10)
        assert np.isclose(one.r_sd, r)
        assert np.array_equal(one.ids, s)


def test_support_fails_when_too_few_nodes():
    cloud = NodeCloud(np.eye(3))
    with pytest.raises(SupportError):
        find_support(np.zeros(3), cloud, n_min=10)


def test_roundtrip_files(tmp_path, cube6):
    cloud, grid = cube6
    save_grid(cloud, grid, tmp_path)
    c2, g2 = load_model_dir(tmp_path)
    assert np.array_equal(c2.coords, cloud.coords)
    assert np.array_equal(g2.cells, grid.cells)
    assert np.array_equal(c2.node_sets["top"], cloud.node_sets["top"])


def test_parse_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.nodes"
    p.write_text("# header\n0 0 0\n1 2\n")
    with pytest.raises(ParseError) as exc:
        read_nodes(p)
    assert ":3" in str(exc.value) or "3" in str(exc.value)
    p.write_text("0 0 nan\n")
    with pytest.raises(DataError):
        read_nodes(p)


def test_degenerate_cell_rejected(tmp_path):
    (tmp_path / "m.nodes").write_text("0 0 0\n1 0 0\n0 1 0\n1 1 0\n")
    (tmp_path / "m.cells").write_text("0 1 2 3\n")
    with pytest.raises(DataError):
        load_grid(tmp_path / "m.nodes", tmp_path / "m.cells")


def test_cylinder_generator_positive_cells():
    cloud, grid = generate_cylinder_grid(0.017, 0.03, 0.0016)
    assert np.all(grid.volumes() > 0)
    assert len(cloud.node_sets["top"]) == len(cloud.node_sets["bottom"])
