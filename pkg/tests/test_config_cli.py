import csv
import json

import numpy as np
import pytest
import yaml

from efg3d.cli import EXIT_DIVERGED, EXIT_FAIL, EXIT_NOT_CONVERGED, EXIT_OK, main
from efg3d.cloud import generate_cube_grid, load_model_dir
from efg3d.config import (
    PRESETS, RunConfig, build_bcs, build_geometry, dump_config, load_config, parse_config, preset,
)
from efg3d.errors import ConfigError
from efg3d.material import MaterialParams
from efg3d.solver import critical_time_step


def small_config(**solver):
    return {
        "name": "tiny",
        "geometry": {"kind": "cube", "edge": 0.1, "nodes_per_edge": 4},
        "materials": [{"E": 3000, "nu": 0.49, "rho": 1000}],
        "bcs": [
            {"set": "bottom"},
            {"set": "top", "mask": [False, False, True], "program": "ramp", "u_max": [0, 0, -0.01]},
        ],
        "solver": solver,
    }


def test_empty_config_lists_missing_fields():
    with pytest.raises(ConfigError) as exc:
        parse_config({})
    msg = str(exc.value)
    for field in ("geometry", "materials", "bcs"):
        assert field in msg


def test_nested_field_paths_reported():
    cfg = small_config()
    cfg["materials"][0]["nu"] = 0.7
    cfg["solver"] = {"bogus": 1}
    with pytest.raises(ConfigError) as exc:
        parse_config(cfg)
    assert "materials.0.nu" in str(exc.value)
    assert "solver.bogus" in str(exc.value)


def test_yaml_and_json_load(tmp_path):
    (tmp_path / "a.yaml").write_text(yaml.safe_dump(small_config()))
    (tmp_path / "b.json").write_text(json.dumps(small_config()))
    a, b = load_config(tmp_path / "a.yaml"), load_config(tmp_path / "b.json")
    assert a == b
    dump_config(a, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == a


def test_file_geometry_paths_relative_to_config(tmp_path):
    cloud, grid = generate_cube_grid(0.1, 3)
    from efg3d.cloud import save_grid
    save_grid(cloud, grid, tmp_path / "model")
    cfg = small_config()
    cfg["geometry"] = {"kind": "files", "nodes": "model/model.nodes", "cells": "model/model.cells",
                       "node_sets": {"bottom": "model/model.bottom.set", "top": "model/model.top.set"}}
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(cfg))
    c2, g2 = build_geometry(load_config(tmp_path / "run.yaml"))
    assert np.array_equal(c2.coords, cloud.coords) and len(g2.cells) == len(grid.cells)


def test_unknown_set_and_preset():
    cfg = parse_config(small_config())
    cfg.bcs[0].set = "nowhere"
    cloud, _ = build_geometry(cfg)
    with pytest.raises(ConfigError):
        build_bcs(cfg, cloud)
    with pytest.raises(ConfigError) as exc:
        preset("cube-stretch")
    assert "cube-compression" in str(exc.value)
    with pytest.raises(ConfigError):
        preset("cube-compression", 9)


def test_preset_fidelity():
    for name in PRESETS:
        cfg = preset(name, 0 if name in ("cylinder-extension", "cylinder-shear") else 1)
        assert isinstance(cfg, RunConfig)
        m = cfg.materials[0]
        assert (m.E, m.rho) == (3000.0, 1000.0)
        assert m.nu == 0.49
    cube = preset("cube-compression", 1)
    assert (cube.geometry.edge, cube.geometry.nodes_per_edge) == (0.1, 6)
    top = [b for b in cube.bcs if b.set == "top"][0]
    assert top.u_max == (0.0, 0.0, -0.02) and top.mask == (False, False, True)
    assert {b.set: b.mask for b in cube.bcs}["xmin"] == (True, False, False)
    assert preset("cube-compression", 2).geometry.nodes_per_edge == 11
    cyl = preset("cylinder-compression", 1)
    assert (cyl.geometry.height, cyl.geometry.diameter) == (0.1, 0.1)
    assert cyl.bcs[-1].u_max == (0.0, 0.0, -0.02)
    assert preset("cylinder-extension", 0).bcs[-1].u_max == (0.0, 0.0, 0.1)
    assert preset("cylinder-shear", 0).bcs[-1].u_max == (0.05, 0.0, 0.0)
    tor = preset("cube-torsion", 1, nu=0.3)
    assert tor.materials[0].nu == 0.3 and tor.geometry.edge == 1.0 and tor.geometry.nodes_per_edge == 16
    assert tor.bcs[1].program == "torsion" and tor.bcs[1].angle_deg == 30.0
    ind = preset("cylinder-indentation", 1)
    assert (ind.geometry.height, ind.geometry.diameter) == (0.017, 0.030)
    assert ind.bcs[1].u_max == (0.0, 0.0, -0.012) and ind.bcs[1].radius == pytest.approx(0.0075)


def test_indenter_footprint_selection():
    cfg = preset("cylinder-indentation", 1)
    cloud, _ = build_geometry(cfg)
    bcs = build_bcs(cfg, cloud)
    r = np.hypot(*cloud.coords[bcs[1].nodes, :2].T)
    assert r.max() <= 0.0075 + 1e-12
    assert len(bcs[1].nodes) < len(cloud.node_sets["top"])


# ---------------------------------------------------------------------------
# command line


def test_generate_cube_writes_216_nodes(tmp_path, capsys):
    assert main(["generate", "cube", "0.1", "6", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "model.nodes").read_text().strip().splitlines()
    assert len(lines) == 216
    cloud, grid = load_model_dir(tmp_path)
    ref, ref_grid = generate_cube_grid(0.1, 6)
    assert np.array_equal(cloud.coords, ref.coords) and np.array_equal(grid.cells, ref_grid.cells)


def test_generate_cylinder(tmp_path):
    assert main(["generate", "cylinder", "0.1", "0.1", "0.00822", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "model.top.set").is_file()


def test_generate_rejects_one_node_per_edge(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate", "cube", "0.1", "1"])
    assert exc.value.code == 2


def test_verify_unknown_benchmark_lists_presets(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["verify", "cube-stretch"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "cube-compression" in err and "cylinder-indentation" in err


def test_run_empty_config_reports_schema(tmp_path, capsys):
    (tmp_path / "empty.yaml").write_text("")
    assert main(["run", str(tmp_path / "empty.yaml")]) == EXIT_FAIL
    err = capsys.readouterr().err
    assert "geometry" in err and "materials" in err and "bcs" in err


def test_run_not_converged_and_outputs(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(small_config(max_steps=30)))
    code = main(["run", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "o")])
    assert code == EXIT_NOT_CONVERGED
    assert (tmp_path / "o" / "tiny_final.vtk").is_file()
    rows = list(csv.reader(open(tmp_path / "o" / "tiny_summary.csv")))
    assert rows[0] == ["step", "time", "kinetic_proxy", "max_increment"]


def test_run_converges(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(small_config()))
    assert main(["run", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert "converged" in capsys.readouterr().out


def test_run_oversized_dt_diverges(tmp_path, capsys):
    cloud, _ = generate_cube_grid(0.1, 4)
    dt = 10 * critical_time_step(cloud, MaterialParams(3000, 0.49, 1000))
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(small_config(max_steps=5000)))
    with pytest.warns(RuntimeWarning):
        code = main(["run", str(tmp_path / "c.yaml"), "--dt", str(float(dt)), "--out", str(tmp_path / "o")])
    assert code == EXIT_DIVERGED


def test_audit_reports_and_warns(tmp_path, capsys):
    main(["generate", "cube", "0.1", "6", "--out", str(tmp_path / "m")])
    capsys.readouterr()
    assert main(["audit", str(tmp_path / "m"), "--out", str(tmp_path / "a")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "within 10x" in out
    assert (tmp_path / "a" / "audit.csv").is_file() and (tmp_path / "a" / "kronecker.png").is_file()
    main(["audit", str(tmp_path / "m"), "--eps", "1e-9", "--samples", "5", "--no-figures"])
    assert "below sqrt(machine precision)" in capsys.readouterr().err


def test_audit_empty_dir(tmp_path, capsys):
    assert main(["audit", str(tmp_path)]) == EXIT_FAIL
    assert "error" in capsys.readouterr().err
