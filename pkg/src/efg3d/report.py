"""Output writers: VTK legacy files, run summaries and report figures."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .cloud import IntegrationGrid, NodeCloud

VTK_TETRA, VTK_VERTEX = 10, 1


def grid_shares_nodes(cloud: NodeCloud, grid: IntegrationGrid):
    """True when the background-grid vertices are the cloud nodes themselves."""
    v = grid.vertices
    return v.shape == cloud.coords.shape and np.array_equal(v, cloud.coords)


def write_vtk(path, cloud: NodeCloud, grid: IntegrationGrid | None, u, title="efg3d displacement"):
    """Legacy ASCII UNSTRUCTURED_GRID with nodal displacement vectors.

    Tetrahedra are written when the grid vertices coincide with the nodes,
    otherwise each node becomes a VERTEX cell.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    X = cloud.coords
    u = np.asarray(u, dtype=float).reshape(len(X), 3)
    tets = grid is not None and grid_shares_nodes(cloud, grid)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(title.replace("\n", " ")[:255] + "\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(X)} double\n")
        np.savetxt(fh, X, fmt="%.17g")
        if tets:
            cells = grid.cells
            fh.write(f"CELLS {len(cells)} {5 * len(cells)}\n")
            np.savetxt(fh, np.column_stack([np.full(len(cells), 4), cells]), fmt="%d")
            fh.write(f"CELL_TYPES {len(cells)}\n")
            np.savetxt(fh, np.full(len(cells), VTK_TETRA), fmt="%d")
        else:
            n = len(X)
            fh.write(f"CELLS {n} {2 * n}\n")
            np.savetxt(fh, np.column_stack([np.ones(n, dtype=int), np.arange(n)]), fmt="%d")
            fh.write(f"CELL_TYPES {n}\n")
            np.savetxt(fh, np.full(n, VTK_VERTEX), fmt="%d")
        fh.write(f"POINT_DATA {len(X)}\nVECTORS displacement double\n")
        np.savetxt(fh, u, fmt="%.17g")
    return path


def read_vtk_displacement(path):
    """Points and displacement vectors from a file written by :func:`write_vtk`."""
    lines = Path(path).read_text().split("\n")
    i = next(k for k, ln in enumerate(lines) if ln.startswith("POINTS"))
    n = int(lines[i].split()[1])
    pts = np.loadtxt(lines[i + 1: i + 1 + n]).reshape(n, 3)
    j = next(k for k, ln in enumerate(lines) if ln.startswith("VECTORS"))
    disp = np.loadtxt(lines[j + 1: j + 1 + n]).reshape(n, 3)
    return pts, disp


SUMMARY_HEADER = ("step", "time", "kinetic_proxy", "max_increment")


def write_summary(path, history):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for step, t, ke, inc in history:
            w.writerow([int(step), repr(float(t)), repr(float(ke)), repr(float(inc))])
    return path


# ---------------------------------------------------------------------------
# figures (matplotlib is imported lazily so the solver never needs it)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_history(path, history, T=None):
    """Kinetic proxy and max increment against step."""
    plt = _pyplot()
    h = np.asarray(history, dtype=float).reshape(-1, 4)
    fig, ax = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    floor = np.finfo(float).tiny
    ax[0].semilogy(h[:, 0], np.maximum(h[:, 2], floor))
    ax[0].set_ylabel("sum m v^2")
    ax[1].semilogy(h[:, 0], np.maximum(h[:, 3], floor))
    ax[1].set_ylabel("max |du| (m)")
    ax[1].set_xlabel("step")
    if T is not None and len(h) > 1 and h[-1, 1] > 0:
        ramp_end = np.interp(T, h[:, 1], h[:, 0])
        for a in ax:
            a.axvline(ramp_end, color="0.6", ls="--", lw=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_comparison(path, coords, numerical, reference, axis=2, labels=("x", "y", "z")):
    """Numerical vs reference displacement components along one coordinate."""
    plt = _pyplot()
    fig, ax = plt.subplots(1, 3, figsize=(11, 3.4))
    for k in range(3):
        ax[k].plot(coords[:, axis], reference[:, k], ".", ms=3, color="0.6", label="analytical")
        ax[k].plot(coords[:, axis], numerical[:, k], "x", ms=3, label="numerical")
        ax[k].set_xlabel(f"{labels[axis]} (m)")
        ax[k].set_ylabel(f"u_{labels[k]} (m)")
    ax[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_deformed(path, cloud: NodeCloud, u, component=2, section_axis=1, band=None):
    """Deformed positions of a thin slab of nodes, coloured by one component."""
    plt = _pyplot()
    X = cloud.coords
    mid = 0.5 * (X[:, section_axis].min() + X[:, section_axis].max())
    if band is None:
        band = 0.5 * float(np.mean(cloud.nodal_spacing))
    sel = np.abs(X[:, section_axis] - mid) <= band
    if not sel.any():
        sel = np.ones(len(X), dtype=bool)
    x = X[sel] + np.asarray(u)[sel]
    a, b = [k for k in range(3) if k != section_axis]
    fig, ax = plt.subplots(figsize=(5, 4.5))
    sc = ax.scatter(x[:, a], x[:, b], c=np.asarray(u)[sel, component], s=10, cmap="viridis")
    ax.scatter(X[sel, a], X[sel, b], s=2, color="0.75", zorder=0)
    ax.set_aspect("equal")
    ax.set_xlabel("xyz"[a] + " (m)")
    ax.set_ylabel("xyz"[b] + " (m)")
    fig.colorbar(sc, ax=ax, label=f"u_{'xyz'[component]} (m)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_kronecker(path, audit):
    """Measured interpolation deviation against the analytic bound per sample."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    ok = audit.bound > 0
    ax.loglog(audit.bound[ok], audit.deviation[ok], "o", ms=4)
    if ok.any():
        lim = np.array([audit.bound[ok].min(), audit.bound[ok].max()])
        ax.loglog(lim, lim, "k-", lw=0.8, label="bound")
        ax.loglog(lim, 10 * lim, "k--", lw=0.8, label="10 x bound")
        ax.legend(fontsize=8)
    ax.set_xlabel("analytic bound")
    ax.set_ylabel("max |phi_i(x_j) - delta_ij|")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
