"""Run configuration schema, benchmark presets and model assembly.

Configurations are YAML (or JSON) documents validated with pydantic; schema
violations are reported with dotted field paths.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .approx import ApproxParams
from .cloud import NodeCloud, generate_cube_grid, generate_cylinder_grid, load_grid
from .errors import ConfigError
from .material import MaterialParams
from .solver import BoundaryCondition, RunSettings

Vec3 = tuple[float, float, float]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CubeGeometry(_Strict):
    kind: Literal["cube"]
    edge: float = Field(gt=0)
    nodes_per_edge: int = Field(ge=2)


class CylinderGeometry(_Strict):
    kind: Literal["cylinder"]
    height: float = Field(gt=0)
    diameter: float = Field(gt=0)
    spacing: float = Field(gt=0)
    axial_ratio: float = Field(1.5, gt=0)


class FileGeometry(_Strict):
    kind: Literal["files"]
    nodes: str
    cells: str
    node_sets: dict[str, str] = {}
    regions: str | None = None


Geometry = Annotated[Union[CubeGeometry, CylinderGeometry, FileGeometry], Field(discriminator="kind")]


class ApproxConfig(_Strict):
    eps: float = Field(1e-5, gt=0, lt=1)
    n_min: int = Field(10, ge=1)
    mu_scale: float = Field(1e-5, ge=0)
    support_factor: float = Field(1.8, gt=0)
    max_gradient: float = Field(8.0, ge=0)
    weight: Literal["regularized", "exponential"] = "regularized"

    def params(self) -> ApproxParams:
        return ApproxParams(weight=self.weight, eps=self.eps, n_min=self.n_min, mu_scale=self.mu_scale,
                            support_factor=self.support_factor, max_gradient=self.max_gradient)


class MaterialConfig(_Strict):
    region: int = 0
    E: float = Field(gt=0)
    nu: float = Field(gt=-1, lt=0.5)
    rho: float = Field(gt=0)


class BCConfig(_Strict):
    set: str
    mask: tuple[bool, bool, bool] = (True, True, True)
    program: Literal["fixed", "ramp", "torsion"] = "fixed"
    u_max: Vec3 = (0.0, 0.0, 0.0)
    T: float | None = Field(None, gt=0)
    axis: Vec3 = (1.0, 0.0, 0.0)
    center: Vec3 = (0.0, 0.0, 0.0)
    angle_deg: float = 0.0
    # keep only nodes of the set within this lateral distance of radius_center
    radius: float | None = Field(None, gt=0)
    radius_center: tuple[float, float] = (0.0, 0.0)


class SolverConfig(_Strict):
    dt: float | None = Field(None, gt=0)
    safety: float = Field(0.5, gt=0)
    spectral_safety: float = Field(0.8, ge=0)
    damping: float | None = Field(None, ge=0)
    ramp_steps: float = Field(200.0, gt=0)
    tol_u: float = Field(1e-9, gt=0)
    settle_steps: int = Field(100, ge=1)
    max_steps: int = Field(200_000, ge=1)
    record_every: int = Field(10, ge=1)


class OutputConfig(_Strict):
    directory: str = "out"
    vtk_every: int = Field(0, ge=0)


class RunConfig(_Strict):
    name: str = "run"
    geometry: Geometry
    approx: ApproxConfig = ApproxConfig()
    materials: list[MaterialConfig] = Field(min_length=1)
    bcs: list[BCConfig] = Field(min_length=1)
    solver: SolverConfig = SolverConfig()
    output: OutputConfig = OutputConfig()

    def settings(self, workers=1, deterministic=False) -> RunSettings:
        s = self.solver
        return RunSettings(dt=s.dt, safety=s.safety, spectral_safety=s.spectral_safety, damping=s.damping,
                           ramp_steps=s.ramp_steps, tol_u=s.tol_u, settle_steps=s.settle_steps,
                           max_steps=s.max_steps, record_every=s.record_every,
                           snapshot_every=self.output.vtk_every, workers=workers, deterministic=deterministic)

    def material_map(self):
        out = {}
        for m in self.materials:
            if m.region in out:
                raise ConfigError(f"materials: region {m.region} defined twice")
            out[m.region] = MaterialParams(m.E, m.nu, m.rho)
        return out


def _format_errors(exc: ValidationError):
    lines = []
    for e in exc.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {path}: {e['msg']}")
    return "invalid run configuration:\n" + "\n".join(lines)


def parse_config(data) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("invalid run configuration:\n  <root>: expected a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from None
    cfg = parse_config(data)
    if isinstance(cfg.geometry, FileGeometry):
        # relative model paths are taken relative to the configuration file
        g = cfg.geometry
        base = path.parent
        fix = lambda p: str(p if Path(p).is_absolute() else base / p)
        cfg.geometry = FileGeometry(kind="files", nodes=fix(g.nodes), cells=fix(g.cells),
                                    node_sets={k: fix(v) for k, v in g.node_sets.items()},
                                    regions=fix(g.regions) if g.regions else None)
    return cfg


def dump_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False))


# ---------------------------------------------------------------------------
# model assembly


def build_geometry(cfg: RunConfig):
    g = cfg.geometry
    if isinstance(g, CubeGeometry):
        return generate_cube_grid(g.edge, g.nodes_per_edge)
    if isinstance(g, CylinderGeometry):
        return generate_cylinder_grid(g.height, g.diameter, g.spacing, g.axial_ratio)
    return load_grid(g.nodes, g.cells, g.node_sets, g.regions)


def select_nodes(bc: BCConfig, cloud: NodeCloud):
    if bc.set not in cloud.node_sets:
        raise ConfigError(f"bcs: unknown node set {bc.set!r} (available: {', '.join(sorted(cloud.node_sets))})")
    nodes = np.asarray(cloud.node_sets[bc.set], dtype=np.int64)
    if bc.radius is not None:
        xy = cloud.coords[nodes, :2] - np.asarray(bc.radius_center)
        nodes = nodes[np.hypot(xy[:, 0], xy[:, 1]) <= bc.radius * (1 + 1e-12)]
    if nodes.size == 0:
        raise ConfigError(f"bcs: node set {bc.set!r} selects no nodes")
    return nodes


def build_bcs(cfg: RunConfig, cloud: NodeCloud):
    out = []
    for bc in cfg.bcs:
        nodes = select_nodes(bc, cloud)
        out.append(BoundaryCondition(nodes, bc.mask, bc.program, bc.u_max, bc.T, bc.axis, bc.center,
                                     math.radians(bc.angle_deg), name=bc.set))
    return out


# ---------------------------------------------------------------------------
# benchmark presets

E_REF, NU_REF, RHO_REF = 3000.0, 0.49, 1000.0

CUBE_LEVELS = {1: 6, 2: 11, 3: 21, 4: 41}
CYLINDER_LEVELS = {1: 0.00822, 2: 0.00444, 3: 0.00265}
# about 12,957 nodes for the extension and shear grids
CYLINDER_DENSE_SPACING = 0.0036
TORSION_LEVELS = {1: 16, 2: 26}
INDENTATION_LEVELS = {1: 0.0016, 2: 0.00113}


def _material(nu=NU_REF):
    return [MaterialConfig(region=0, E=E_REF, nu=nu, rho=RHO_REF)]


def _level(table, level, name):
    if level not in table:
        raise ConfigError(f"{name}: unknown cloud level {level} (available: {sorted(table)})")
    return table[level]


def preset_cube_compression(level=1, **_):
    n = _level(CUBE_LEVELS, level, "cube-compression")
    return RunConfig(
        name=f"cube-compression-{level}",
        geometry=CubeGeometry(kind="cube", edge=0.1, nodes_per_edge=n),
        materials=_material(),
        bcs=[
            BCConfig(set="xmin", mask=(True, False, False)),
            BCConfig(set="ymin", mask=(False, True, False)),
            BCConfig(set="bottom", mask=(False, False, True)),
            BCConfig(set="top", mask=(False, False, True), program="ramp", u_max=(0.0, 0.0, -0.02)),
        ],
    )


def _cylinder(name, level, uz=0.0, ux=0.0, dense=False):
    spacing = CYLINDER_DENSE_SPACING if dense and level == 0 else _level(CYLINDER_LEVELS, level, name)
    return RunConfig(
        name=f"{name}-{level}",
        geometry=CylinderGeometry(kind="cylinder", height=0.1, diameter=0.1, spacing=spacing),
        materials=_material(),
        bcs=[
            BCConfig(set="bottom"),
            BCConfig(set="top", program="ramp", u_max=(ux, 0.0, uz)),
        ],
    )


def preset_cylinder_compression(level=1, **_):
    return _cylinder("cylinder-compression", level, uz=-0.02)


def preset_cylinder_extension(level=1, **_):
    # level 0 is the 12,957-node grid used for this case
    return _cylinder("cylinder-extension", level, uz=0.1, dense=True)


def preset_cylinder_shear(level=1, **_):
    return _cylinder("cylinder-shear", level, ux=0.05, dense=True)


def preset_cube_torsion(level=1, nu=NU_REF, angle_deg=30.0, **_):
    n = _level(TORSION_LEVELS, level, "cube-torsion")
    cfg = RunConfig(
        name=f"cube-torsion-{level}",
        geometry=CubeGeometry(kind="cube", edge=1.0, nodes_per_edge=n),
        materials=_material(nu),
        bcs=[
            BCConfig(set="xmin"),
            BCConfig(set="xmax", program="torsion", axis=(1.0, 0.0, 0.0), center=(1.0, 0.5, 0.5),
                     angle_deg=angle_deg),
        ],
    )
    cfg.solver.ramp_steps = 1000.0
    return cfg


def preset_cylinder_indentation(level=1, depth=0.012, footprint=0.25, **_):
    spacing = _level(INDENTATION_LEVELS, level, "cylinder-indentation")
    height, diameter = 0.017, 0.030
    cfg = RunConfig(
        name=f"cylinder-indentation-{level}",
        geometry=CylinderGeometry(kind="cylinder", height=height, diameter=diameter, spacing=spacing),
        materials=_material(),
        bcs=[
            BCConfig(set="bottom"),
            BCConfig(set="top", program="ramp", u_max=(0.0, 0.0, -depth), radius=footprint * diameter),
        ],
    )
    # the indenter edge stiffens strongly at depth; a slower ramp and a smaller
    # fraction of the reference stable step keep every Gauss point positive
    cfg.solver.ramp_steps = 4000.0
    cfg.solver.spectral_safety = 0.4
    return cfg


PRESETS = {
    "cube-compression": preset_cube_compression,
    "cylinder-compression": preset_cylinder_compression,
    "cylinder-extension": preset_cylinder_extension,
    "cylinder-shear": preset_cylinder_shear,
    "cube-torsion": preset_cube_torsion,
    "cylinder-indentation": preset_cylinder_indentation,
}


def preset(name, level=1, **options) -> RunConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown benchmark {name!r}; available: {', '.join(PRESETS)}") from None
    return factory(level=level, **options)
