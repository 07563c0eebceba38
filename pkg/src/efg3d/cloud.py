"""Point clouds, background integration grids and support-domain search.

The node cloud carries the approximation; the tetrahedral background grid
only carries quadrature.  Generated shapes share vertices between the two,
but nothing here requires that.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .errors import DataError, ParseError, SupportError

# 4-point rule on a tetrahedron, barycentric coordinates (beta, alpha, alpha, alpha)
GAUSS_ALPHA = (5.0 - math.sqrt(5.0)) / 20.0
GAUSS_BETA = (5.0 + 3.0 * math.sqrt(5.0)) / 20.0
GAUSS_BARY = np.full((4, 4), GAUSS_ALPHA)
np.fill_diagonal(GAUSS_BARY, GAUSS_BETA)

DEGENERATE_VOLUME = 1e-18
GROWTH = 1.2


@dataclass
class NodeCloud:
    coords: np.ndarray
    node_sets: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.coords)):
            raise DataError("node coordinates must be finite")
        sets = {}
        for name, ids in self.node_sets.items():
            ids = np.unique(np.asarray(ids, dtype=np.int64))
            if ids.size and (ids[0] < 0 or ids[-1] >= len(self.coords)):
                raise DataError(f"node set {name!r} references ids outside 0..{len(self.coords) - 1}")
            sets[name] = ids
        self.node_sets = sets
        self._tree = None
        self._spacing = None

    def __len__(self):
        return len(self.coords)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.coords)
        return self._tree

    @property
    def nodal_spacing(self) -> np.ndarray:
        """Mean distance from each node to its 4 nearest other nodes."""
        if self._spacing is None:
            k = min(5, len(self))
            if k < 2:
                self._spacing = np.ones(len(self))
            else:
                d, _ = self.tree.query(self.coords, k=k)
                self._spacing = d[:, 1:].mean(axis=1)
        return self._spacing

    @property
    def diameter(self) -> float:
        lo, hi = self.coords.min(axis=0), self.coords.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def average_spacing(self) -> float:
        """Mean nearest-neighbour distance over the cloud."""
        d, _ = self.tree.query(self.coords, k=2)
        return float(d[:, 1].mean())


@dataclass
class IntegrationGrid:
    vertices: np.ndarray
    cells: np.ndarray
    region_id: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 3)
        self.cells = np.ascontiguousarray(self.cells, dtype=np.int64).reshape(-1, 4)
        if self.region_id is None:
            self.region_id = np.zeros(len(self.cells), dtype=np.int64)
        self.region_id = np.asarray(self.region_id, dtype=np.int64)
        if len(self.region_id) != len(self.cells):
            raise DataError("region_id must have one entry per cell")
        if self.cells.size and (self.cells.min() < 0 or self.cells.max() >= len(self.vertices)):
            raise DataError("cell references a vertex id out of range")

    def __len__(self):
        return len(self.cells)

    def volumes(self) -> np.ndarray:
        return tet_volumes(self.vertices, self.cells)

    def total_volume(self) -> float:
        return float(self.volumes().sum())


@dataclass
class GaussPoints:
    """Quadrature points of a background grid, stored as parallel arrays."""

    position: np.ndarray
    weight: np.ndarray
    cell: np.ndarray
    region_id: np.ndarray

    def __len__(self):
        return len(self.weight)


@dataclass
class SupportQueryResult:
    ids: np.ndarray
    r_sd: float


def tet_volumes(vertices, cells):
    v = vertices[cells]
    e1, e2, e3 = v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]
    return np.einsum("ij,ij->i", e1, np.cross(e2, e3)) / 6.0


def repair_orientation(vertices, cells):
    """Swap the last two vertices of negatively oriented cells (in place)."""
    vol = tet_volumes(vertices, cells)
    neg = vol < 0
    cells[neg, 2], cells[neg, 3] = cells[neg, 3].copy(), cells[neg, 2].copy()
    return np.abs(vol)


# ---------------------------------------------------------------------------
# generators

def generate_cube_grid(edge, nodes_per_edge):
    """Regular lattice on [0, edge]^3 with each sub-cube split into 6 tets."""
    n = int(nodes_per_edge)
    if n < 2 or n != nodes_per_edge:
        raise ValueError(f"nodes_per_edge must be an integer >= 2, got {nodes_per_edge!r}")
    if not edge > 0:
        raise ValueError(f"edge must be positive, got {edge!r}")
    t = np.linspace(0.0, edge, n)
    z, y, x = np.meshgrid(t, t, t, indexing="ij")
    coords = np.column_stack([x.ravel(), y.ravel(), z.ravel()])

    def nid(i, j, k):
        return i + n * (j + n * k)

    i, j, k = np.meshgrid(np.arange(n - 1), np.arange(n - 1), np.arange(n - 1), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    corner = {
        (a, b, c): nid(i + a, j + b, k + c) for a in (0, 1) for b in (0, 1) for c in (0, 1)
    }
    # Kuhn split: one tet per axis ordering along the 000 -> 111 diagonal
    tets = []
    for order in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
        path = [(0, 0, 0)]
        cur = [0, 0, 0]
        for ax in order:
            cur[ax] = 1
            path.append(tuple(cur))
        tets.append(np.column_stack([corner[p] for p in path]))
    cells = np.stack(tets, axis=1).reshape(-1, 4)
    repair_orientation(coords, cells)

    tol = 1e-9 * edge
    sets = {
        "xmin": np.flatnonzero(coords[:, 0] < tol),
        "xmax": np.flatnonzero(coords[:, 0] > edge - tol),
        "ymin": np.flatnonzero(coords[:, 1] < tol),
        "ymax": np.flatnonzero(coords[:, 1] > edge - tol),
        "bottom": np.flatnonzero(coords[:, 2] < tol),
        "top": np.flatnonzero(coords[:, 2] > edge - tol),
    }
    return NodeCloud(coords, sets), IntegrationGrid(coords, cells)


def _disk_layer(radius, spacing):
    """Centre node plus concentric rings with arc and radial spacing ~ spacing."""
    n_rings = max(1, round(radius / spacing))
    pts = [np.zeros((1, 2))]
    for k in range(1, n_rings + 1):
        r = radius * k / n_rings
        m = max(6, round(2.0 * math.pi * r / spacing))
        # stagger alternate rings so neighbouring rings do not align radially
        theta = 2.0 * math.pi * (np.arange(m) + 0.5 * (k % 2)) / m
        pts.append(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
    return np.vstack(pts)


def generate_cylinder_grid(height, diameter, target_spacing, axial_ratio=1.5):
    """Layered cylinder along +z with its base centred on the origin.

    Each layer is a ring pattern with in-plane spacing ``target_spacing``;
    layers are spaced ``axial_ratio * target_spacing`` apart (rounded to fit
    the height, with a layer on the mid-plane).  The background grid is the
    Delaunay tetrahedralization of the nodes with zero-volume slivers removed.
    """
    if not (height > 0 and diameter > 0 and target_spacing > 0 and axial_ratio > 0):
        raise ValueError("cylinder dimensions and spacing must be positive")
    layer = _disk_layer(0.5 * diameter, target_spacing)
    n_gaps = max(2, round(height / (axial_ratio * target_spacing)))
    n_gaps += n_gaps % 2          # even gap count puts a node layer on the mid-plane
    n_layers = n_gaps + 1
    zs = np.linspace(0.0, height, n_layers)
    coords = np.vstack([np.column_stack([layer, np.full(len(layer), z)]) for z in zs])

    tri = Delaunay(coords, qhull_options="Qbb Qc Qz Q12")
    cells = np.ascontiguousarray(tri.simplices, dtype=np.int64)
    vol = repair_orientation(coords, cells)
    keep = vol > 1e-9 * vol.mean()
    cells = cells[keep]

    tol = 1e-9 * height
    sets = {
        "bottom": np.flatnonzero(coords[:, 2] < tol),
        "top": np.flatnonzero(coords[:, 2] > height - tol),
    }
    return NodeCloud(coords, sets), IntegrationGrid(coords, cells)


# ---------------------------------------------------------------------------
# file I/O

def _data_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def read_nodes(path):
    rows = []
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(path, lineno, f"expected 3 coordinates, got {len(parts)}")
        try:
            xyz = [float(p) for p in parts]
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        if not all(math.isfinite(c) for c in xyz):
            raise DataError(f"{path}:{lineno}: non-finite coordinate")
        rows.append(xyz)
    return np.array(rows, dtype=float).reshape(-1, 3)


def read_cells(path):
    rows = []
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(path, lineno, f"expected 4 vertex ids, got {len(parts)}")
        try:
            rows.append([int(p) for p in parts])
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    return np.array(rows, dtype=np.int64).reshape(-1, 4)


def read_node_set(path):
    ids = []
    for lineno, line in _data_lines(path):
        try:
            ids.append(int(line))
        except ValueError:
            raise ParseError(path, lineno, f"expected one integer id, got {line!r}") from None
    return np.array(ids, dtype=np.int64)


def load_grid(nodes_file, cells_file, node_set_files=None, regions_file=None):
    """Load a cloud and its background grid (cell vertices index the nodes).

    Negatively oriented cells are repaired by a vertex swap; degenerate cells
    are rejected.
    """
    coords = read_nodes(nodes_file)
    cells = read_cells(cells_file)
    if cells.size and (cells.min() < 0 or cells.max() >= len(coords)):
        raise DataError(f"{cells_file}: cell references a node id out of range")
    vol = repair_orientation(coords, cells)
    bad = np.flatnonzero(vol < DEGENERATE_VOLUME)
    if bad.size:
        raise DataError(f"{cells_file}: degenerate cell at line index {int(bad[0])} (|V| = {vol[bad[0]]:.3e})")
    sets = {}
    for name, path in (node_set_files or {}).items():
        sets[name] = read_node_set(path)
    regions = read_node_set(regions_file) if regions_file else None
    return NodeCloud(coords, sets), IntegrationGrid(coords, cells, regions)


def save_grid(cloud, grid, out_dir, prefix="model"):
    """Write nodes, cells, regions and one file per node set; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "nodes": out / f"{prefix}.nodes",
        "cells": out / f"{prefix}.cells",
        "regions": out / f"{prefix}.regions",
    }
    np.savetxt(paths["nodes"], cloud.coords, fmt="%.17g")
    np.savetxt(paths["cells"], grid.cells, fmt="%d")
    np.savetxt(paths["regions"], grid.region_id, fmt="%d")
    for name, ids in cloud.node_sets.items():
        p = out / f"{prefix}.{name}.set"
        np.savetxt(p, ids, fmt="%d")
        paths[f"set:{name}"] = p
    return paths


def load_model_dir(model_dir, prefix="model"):
    """Inverse of :func:`save_grid`."""
    d = Path(model_dir)
    nodes, cells = d / f"{prefix}.nodes", d / f"{prefix}.cells"
    if not nodes.is_file() or not cells.is_file():
        raise DataError(f"{d}: no {prefix}.nodes / {prefix}.cells found")
    sets = {p.name[len(prefix) + 1:-4]: p for p in sorted(d.glob(f"{prefix}.*.set"))}
    regions = d / f"{prefix}.regions"
    return load_grid(nodes, cells, sets, regions if regions.is_file() else None)


# ---------------------------------------------------------------------------
# quadrature

def gauss_points(grid: IntegrationGrid) -> GaussPoints:
    vol = grid.volumes()
    if np.any(vol <= 0):
        raise DataError("integration grid contains non-positive volume cells")
    verts = grid.vertices[grid.cells]                       # (nc, 4, 3)
    pos = np.einsum("gv,cvk->cgk", GAUSS_BARY, verts).reshape(-1, 3)
    weight = np.repeat(vol / 4.0, 4)
    cell = np.repeat(np.arange(len(grid.cells)), 4)
    return GaussPoints(pos, weight, cell, grid.region_id[cell])


# ---------------------------------------------------------------------------
# support domains

def local_spacing(x, cloud: NodeCloud):
    """Characteristic spacing near x: nodal spacing of the nearest node."""
    _, nearest = cloud.tree.query(np.atleast_2d(x))
    return cloud.nodal_spacing[nearest]


def find_support(x, cloud: NodeCloud, n_min=10, r_init=None, factor=1.8):
    """All nodes within r_SD of x, growing r_SD by 1.2 until n_min have positive weight."""
    x = np.asarray(x, dtype=float)
    if len(cloud) == 0:
        raise SupportError("empty node cloud")
    r = float(r_init) if r_init is not None else factor * float(local_spacing(x, cloud)[0])
    limit = 2.0 * max(cloud.diameter, 1e-300)
    n_need = n_min
    tree = cloud.tree
    while True:
        ids = tree.query_ball_point(x, r)
        ids = np.sort(np.asarray(ids, dtype=np.int64))
        inner = np.count_nonzero(np.linalg.norm(cloud.coords[ids] - x, axis=1) < r)
        if inner >= n_need:
            return SupportQueryResult(ids, r)
        r *= GROWTH
        if r > limit:
            raise SupportError(f"support radius exceeded {limit:.3g} without {n_min} nodes at {tuple(x)}")


def find_supports(points, cloud: NodeCloud, n_min=10, factor=1.8):
    """Vectorised :func:`find_support` over many points; returns (list of id arrays, radii)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(cloud) == 0:
        raise SupportError("empty node cloud")
    radii = factor * local_spacing(points, cloud)
    n_need = n_min
    limit = 2.0 * max(cloud.diameter, 1e-300)
    tree = cloud.tree
    result = [None] * len(points)
    todo = np.arange(len(points))
    while todo.size:
        found = tree.query_ball_point(points[todo], radii[todo])
        retry = []
        for idx, ids in zip(todo, found):
            ids = np.sort(np.asarray(ids, dtype=np.int64))
            d = np.linalg.norm(cloud.coords[ids] - points[idx], axis=1)
            if np.count_nonzero(d < radii[idx]) >= n_need:
                result[idx] = ids
            else:
                retry.append(idx)
        todo = np.asarray(retry, dtype=np.int64)
        radii[todo] *= GROWTH
        if todo.size and radii[todo].max() > limit:
            bad = todo[np.argmax(radii[todo])]
            raise SupportError(f"support radius exceeded {limit:.3g} without {n_min} nodes at {tuple(points[bad])}")
    return result, radii
