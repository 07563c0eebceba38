"""Total Lagrangian explicit dynamics with dynamic relaxation.

Shape functions and their reference gradients are computed once at the Gauss
points of the background grid.  Each step evaluates the deformation gradient
matrix-free, ``F = I + sum_i u_i (x) grad0 phi_i``, and scatters
``w * (F S) grad0 phi_i`` back to the nodes.  Essential boundary conditions are
imposed by overwriting nodal values, which is exact up to the interpolation
error of the regularized weight.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, eigsh

from .approx import ApproxParams, shape_at_points
from .cloud import GaussPoints, IntegrationGrid, NodeCloud, gauss_points
from .errors import DataError, DivergenceError, InvertedElementError
from .material import MaterialParams, second_pk_stress

log = logging.getLogger(__name__)

PARTITION_SIZE = 4096


# ---------------------------------------------------------------------------
# precomputed shape data

@dataclass
class ShapeTable:
    gauss: GaussPoints
    ids: np.ndarray            # (n_gp, K), -1 padded
    phi: np.ndarray            # (n_gp, K)
    dphi: np.ndarray           # (n_gp, K, 3)
    n_nodes: int
    r_sd: np.ndarray
    Phi: sp.csr_matrix = field(init=False, repr=False)
    Dstack: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        n_gp, K = self.ids.shape
        mask = self.ids >= 0
        rows = np.repeat(np.arange(n_gp), K).reshape(n_gp, K)[mask]
        cols = self.ids[mask]
        self.Phi = sp.csr_matrix((self.phi[mask], (rows, cols)), shape=(n_gp, self.n_nodes))
        # row 3*g + k holds d phi / d X_k at Gauss point g
        srows = (3 * rows[:, None] + np.arange(3)).ravel()
        scols = np.repeat(cols, 3)
        self.Dstack = sp.csr_matrix(
            (self.dphi[mask].ravel(), (srows, scols)), shape=(3 * n_gp, self.n_nodes)
        )
        self.Dstack.sort_indices()
        self._partitions = {}

    def __len__(self):
        return len(self.gauss)

    @property
    def weight(self):
        return self.gauss.weight

    @property
    def region_id(self):
        return self.gauss.region_id

    def residuals(self, coords):
        """Worst partition-of-unity, linear-reproduction and gradient residuals."""
        ones = np.ones(self.n_nodes)
        pou = np.abs(self.Phi @ ones - 1.0).max()
        lin = np.abs(self.Phi @ coords - self.gauss.position).max()
        dsum = np.abs(self.Dstack @ ones).max()
        grad = (self.Dstack @ coords).reshape(-1, 3, 3)
        dlin = np.abs(grad - np.eye(3)).max()
        return {"partition_of_unity": pou, "linear": lin, "gradient_sum": dsum, "gradient_linear": dlin}

    def partitions(self, n_parts):
        """Row blocks of the derivative matrix and its transpose."""
        if n_parts not in self._partitions:
            n_gp = len(self)
            edges = np.linspace(0, n_gp, n_parts + 1).round().astype(int)
            parts = []
            for lo, hi in zip(edges[:-1], edges[1:]):
                if hi > lo:
                    D = self.Dstack[3 * lo: 3 * hi]
                    parts.append((lo, hi, D, D.T.tocsr()))
            self._partitions[n_parts] = parts
        return self._partitions[n_parts]


def precompute(cloud: NodeCloud, grid: IntegrationGrid, params: ApproxParams | None = None) -> ShapeTable:
    params = params or ApproxParams()
    gp = gauss_points(grid)
    batch = shape_at_points(gp.position, cloud, params, gradients=True)
    table = ShapeTable(gp, batch.ids, batch.phi, batch.dphi, len(cloud), batch.r_sd)
    res = table.residuals(cloud.coords)
    log.info(
        "shape table: %d Gauss points, mean support %.1f, max |sum phi - 1| = %.2e",
        len(gp), (batch.ids >= 0).sum(1).mean(), res["partition_of_unity"],
    )
    return table


# ---------------------------------------------------------------------------
# materials per region

class MaterialMap:
    """Region id -> MaterialParams, expanded to per-Gauss-point arrays."""

    def __init__(self, materials):
        if isinstance(materials, MaterialParams):
            materials = {0: materials}
        self.by_region = dict(materials)
        self._cache = {}

    def __getitem__(self, region):
        return self.by_region[region]

    def per_point(self, region_id):
        key = id(region_id)
        if key not in self._cache:
            missing = set(np.unique(region_id).tolist()) - set(self.by_region)
            if missing:
                raise DataError(f"no material for region(s) {sorted(missing)}")
            lut = {r: m for r, m in self.by_region.items()}
            mu = np.array([lut[r].mu for r in region_id])
            kappa = np.array([lut[r].kappa for r in region_id])
            rho = np.array([lut[r].rho for r in region_id])
            self._cache[key] = (region_id, mu, kappa, rho)
        return self._cache[key][1:]


def _as_map(materials):
    return materials if isinstance(materials, MaterialMap) else MaterialMap(materials)


def lump_mass(table: ShapeTable, materials) -> np.ndarray:
    """Row-sum lumping m_i = sum_g rho w_g phi_i(x_g)."""
    _, _, rho = _as_map(materials).per_point(table.region_id)
    m = table.Phi.T @ (rho * table.weight)
    bad = np.flatnonzero(m <= 0)
    if bad.size:
        raise DataError(
            f"{bad.size} node(s) have non-positive lumped mass (first: node {int(bad[0])}); "
            "increase the support size or the node density"
        )
    return m


# ---------------------------------------------------------------------------
# internal forces

def _forces_block(D, DT, w, mu, kappa, u, lo, step):
    grad = (D @ u).reshape(-1, 3, 3)            # [g, k, a] = d u_a / d X_k
    F = np.swapaxes(grad, 1, 2) + np.eye(3)
    S = second_pk_stress(F, None, mu=mu, kappa=kappa, ids=np.arange(lo, lo + len(F)), step=step)
    P = np.einsum("gak,gkl->gal", F, S) * w[:, None, None]
    return DT @ np.swapaxes(P, 1, 2).reshape(-1, 3)


def internal_forces(table: ShapeTable, materials, u, workers=1, deterministic=False, step=None):
    """Nodal internal forces (n, 3).

    Gauss points are split into fixed partitions whose partial forces are
    summed in partition order.  With ``deterministic`` the partitioning
    depends only on the table, so results are identical for any worker count.
    """
    mu, kappa, _ = _as_map(materials).per_point(table.region_id)
    u = np.asarray(u, dtype=float)
    if deterministic:
        n_parts = max(1, math.ceil(len(table) / PARTITION_SIZE))
    else:
        n_parts = max(1, int(workers))
    parts = table.partitions(n_parts)
    w = table.weight

    def block(part):
        lo, hi, D, DT = part
        return _forces_block(D, DT, w[lo:hi], mu[lo:hi], kappa[lo:hi], u, lo, step)

    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            partial = list(pool.map(block, parts))
    else:
        partial = [block(p) for p in parts]
    f = partial[0]
    for p in partial[1:]:
        f = f + p
    return f


# ---------------------------------------------------------------------------
# loading programs and boundary conditions

def smooth_ramp(t, T, u_max=1.0):
    """3-4-5 polynomial: zero velocity and acceleration at t = 0 and t = T."""
    if T <= 0:
        raise ValueError("ramp duration must be positive")
    tau = np.clip(np.asarray(t, dtype=float) / T, 0.0, 1.0)
    return u_max * tau ** 3 * (10.0 - 15.0 * tau + 6.0 * tau ** 2)


def rotation_matrix(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * K @ K


@dataclass
class BoundaryCondition:
    """Prescribed motion of a node set.

    kind: "fixed" (zero), "ramp" (displacement vector ``value`` reached at T),
    or "torsion" (rigid rotation by ``angle`` about ``axis`` through ``center``).
    """

    nodes: np.ndarray
    mask: tuple = (True, True, True)
    kind: str = "fixed"
    value: tuple = (0.0, 0.0, 0.0)
    T: float = 1.0
    axis: tuple = (1.0, 0.0, 0.0)
    center: tuple = (0.0, 0.0, 0.0)
    angle: float = 0.0
    name: str = ""

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        self.mask = tuple(bool(m) for m in self.mask)
        if self.kind not in ("fixed", "ramp", "torsion"):
            raise ValueError(f"unknown boundary program {self.kind!r}")

    def displacement(self, t, coords):
        """Target displacement (len(nodes), 3) at time t."""
        n = len(self.nodes)
        if self.kind == "fixed":
            return np.zeros((n, 3))
        if self.kind == "ramp":
            return np.tile(np.asarray(self.value, dtype=float) * smooth_ramp(t, self.T), (n, 1))
        theta = float(smooth_ramp(t, self.T, self.angle))
        R = rotation_matrix(self.axis, theta)
        rel = coords[self.nodes] - np.asarray(self.center, dtype=float)
        return rel @ R.T - rel

    def final_displacement(self, coords):
        return self.displacement(self.T, coords)


class ConstraintSet:
    """All boundary conditions flattened into (node, axis) index arrays."""

    def __init__(self, bcs, coords):
        self.bcs = list(bcs)
        self.coords = coords
        self.free = np.ones((len(coords), 3), dtype=bool)
        for bc in self.bcs:
            for a in range(3):
                if bc.mask[a]:
                    self.free[bc.nodes, a] = False

    def apply(self, u, t):
        for bc in self.bcs:
            target = bc.displacement(t, self.coords)
            for a in range(3):
                if bc.mask[a]:
                    u[bc.nodes, a] = target[:, a]
        return u

    @property
    def duration(self):
        moving = [bc.T for bc in self.bcs if bc.kind != "fixed"]
        return max(moving) if moving else 0.0


# ---------------------------------------------------------------------------
# time step and damping

def critical_time_step(cloud: NodeCloud, materials, safety=0.5):
    """safety * min_i h_i / c_d, h_i the nearest-neighbour distance of node i."""
    mats = _as_map(materials)
    d, _ = cloud.tree.query(cloud.coords, k=2)
    h = d[:, 1].min()
    c = max(m.dilatational_wave_speed for m in mats.by_region.values())
    return safety * h / c


def highest_frequency(table: ShapeTable, materials, mass):
    """Largest circular frequency of the unconstrained linearized system."""
    K = linear_stiffness(table, materials)
    s = sp.diags(1.0 / np.sqrt(np.tile(mass, 3)))
    lam = eigsh(s @ K @ s, k=1, which="LA", tol=1e-6, return_eigenvectors=False,
                v0=np.ones(K.shape[0]))[0]
    return math.sqrt(max(float(lam), 0.0))


def stable_time_step(table: ShapeTable, materials, mass):
    """Undamped central-difference limit 2 / omega_max at the reference state."""
    return 2.0 / highest_frequency(table, materials, mass)


def damping_coefficients(dt, c):
    alpha = 2.0 * dt * dt / (2.0 + c * dt)
    beta = (2.0 - c * dt) / (2.0 + c * dt)
    return alpha, beta


def linear_stiffness(table: ShapeTable, materials):
    """Small-strain stiffness (3n x 3n, component-major dofs a*n + i)."""
    mu, kappa, _ = _as_map(materials).per_point(table.region_id)
    lam = kappa - 2.0 * mu / 3.0
    D = [table.Dstack[k::3] for k in range(3)]
    Wl = sp.diags(lam * table.weight)
    Wm = sp.diags(mu * table.weight)
    lap = sum(D[k].T @ Wm @ D[k] for k in range(3))
    blocks = [[None] * 3 for _ in range(3)]
    for a in range(3):
        for b in range(3):
            blk = D[a].T @ Wl @ D[b] + D[b].T @ Wm @ D[a]
            if a == b:
                blk = blk + lap
            blocks[a][b] = blk
    K = sp.bmat(blocks, format="csr")
    return 0.5 * (K + K.T)


def lowest_frequency(table: ShapeTable, materials, mass, free, iterations=6, seed=0):
    """Estimate the lowest circular frequency of the constrained linearized system.

    Inverse iteration on K v = omega^2 M v over the free dofs, with each
    solve done by Jacobi-preconditioned CG.
    """
    n = table.n_nodes
    K = linear_stiffness(table, materials)
    free_dofs = np.flatnonzero(free.T.ravel())
    if free_dofs.size == 0:
        return 0.0, None
    Kf = K[free_dofs][:, free_dofs].tocsr()
    Mf = np.tile(mass, 3)[free_dofs]
    diag = Kf.diagonal()
    prec = sp.diags(1.0 / np.where(diag > 0, diag, 1.0))
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(free_dofs.size)
    v /= math.sqrt(v @ (Mf * v))
    lam = np.inf
    for _ in range(iterations):
        x, _ = cg(Kf, Mf * v, x0=v / max(lam, 1e-300) if np.isfinite(lam) else None,
                  rtol=1e-6, maxiter=20 * int(math.sqrt(free_dofs.size)) + 200, M=prec)
        v = x / math.sqrt(x @ (Mf * x))
        lam = float(v @ (Kf @ v))
    mode = np.zeros(3 * n)
    mode[free_dofs] = v
    return math.sqrt(max(lam, 0.0)), mode.reshape(3, n).T


def estimate_damping(table, materials, mass, constraints: ConstraintSet, scale=1.0, factor=0.7):
    """c = 2 * factor * omega_min.

    omega_min^2 is the force/displacement ratio of one probe evaluation of the
    nonlinear internal forces along the inverse-iteration mode shape.
    """
    omega_lin, mode = lowest_frequency(table, materials, mass, constraints.free)
    if mode is None:
        return 0.0
    amp = 1e-6 * scale / max(np.abs(mode).max(), 1e-300)
    probe = amp * mode
    f = internal_forces(table, materials, probe)
    num = float(np.sum(probe * f))
    den = float(np.sum(mass[:, None] * probe * probe))
    omega2 = num / den if den > 0 else omega_lin ** 2
    if not omega2 > 0:
        omega2 = omega_lin ** 2
    return 2.0 * factor * math.sqrt(omega2)


# ---------------------------------------------------------------------------
# state and stepping

@dataclass
class SimState:
    u_prev: np.ndarray
    u_curr: np.ndarray
    mass: np.ndarray
    dt: float
    c: float = 0.0
    step: int = 0
    t: float = 0.0
    f_ext: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.mass <= 0):
            raise DataError("all lumped masses must be positive")

    @property
    def alpha(self):
        return damping_coefficients(self.dt, self.c)[0]

    @property
    def beta(self):
        return damping_coefficients(self.dt, self.c)[1]

    @classmethod
    def at_rest(cls, mass, dt, c=0.0):
        n = len(mass)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.asarray(mass, dtype=float), dt, c)

    def kinetic_proxy(self):
        v = (self.u_curr - self.u_prev) / self.dt
        return float(np.sum(self.mass[:, None] * v * v))


def step(state: SimState, table: ShapeTable, materials, constraints: ConstraintSet | None,
         mode="dynamic_relaxation", workers=1, deterministic=False, f_int=None):
    """Advance one explicit step in place and return the state."""
    if f_int is None:
        f_int = internal_forces(table, materials, state.u_curr, workers, deterministic, step=state.step)
    rhs = -f_int if state.f_ext is None else state.f_ext - f_int
    acc = rhs / state.mass[:, None]
    if mode == "central_difference":
        u_next = (state.dt * state.dt) * acc + 2.0 * state.u_curr - state.u_prev
    elif mode == "dynamic_relaxation":
        alpha, beta = damping_coefficients(state.dt, state.c)
        # same operation order as the central difference, so c = 0 matches it bitwise
        u_next = alpha * acc + (1.0 + beta) * state.u_curr - beta * state.u_prev
    else:
        raise ValueError(f"unknown stepping mode {mode!r}")
    t_next = state.t + state.dt
    if constraints is not None:
        constraints.apply(u_next, t_next)
    if not np.all(np.isfinite(u_next)):
        raise DivergenceError(state.step + 1)
    state.u_prev, state.u_curr = state.u_curr, u_next
    state.step += 1
    state.t = t_next
    return state


# ---------------------------------------------------------------------------
# driver

CONVERGED, NOT_CONVERGED, DIVERGED, INVERTED = "converged", "not_converged", "diverged", "inverted"


@dataclass
class RunSettings:
    dt: float | None = None
    safety: float = 0.5
    spectral_safety: float = 0.8       # cap dt at this fraction of 2 / omega_max (0 disables)
    damping: float | None = None
    ramp_steps: float = 200.0          # default T in units of the critical step
    tol_u: float = 1e-9
    settle_steps: int = 100
    max_steps: int = 200_000
    record_every: int = 10
    snapshot_every: int = 0
    workers: int = 1
    deterministic: bool = False


@dataclass
class RunResult:
    status: str
    state: SimState
    history: list
    dt: float
    dt_critical: float
    damping: float
    T: float
    message: str = ""
    snapshots: list = field(default_factory=list)

    @property
    def u(self):
        return self.state.u_curr


def _max_increment(state):
    d = state.u_curr - state.u_prev
    return float(np.sqrt(np.max(np.einsum("ij,ij->i", d, d))))


def run(cloud: NodeCloud, table: ShapeTable, materials, bcs, settings: RunSettings | None = None,
        on_snapshot=None) -> RunResult:
    """Load along the prescribed programs, then relax until increments settle.

    Converged means max nodal increment < tol_u for settle_steps consecutive
    steps after all loading programs have finished.
    """
    settings = settings or RunSettings()
    mats = _as_map(materials)
    mass = lump_mass(table, mats)
    dt_crit = critical_time_step(cloud, mats, settings.safety)
    if settings.spectral_safety > 0:
        dt_crit = min(dt_crit, settings.spectral_safety * stable_time_step(table, mats, mass))
    dt = settings.dt if settings.dt is not None else dt_crit
    if dt > dt_crit * (1 + 1e-12):
        warnings.warn(f"time step {dt:.3e} s exceeds the critical estimate {dt_crit:.3e} s", RuntimeWarning,
                      stacklevel=2)
    for bc in bcs:
        if bc.kind != "fixed" and bc.T is None:
            bc.T = settings.ramp_steps * dt_crit
    constraints = ConstraintSet(bcs, cloud.coords)
    if settings.damping is not None:
        c = settings.damping
    else:
        c = estimate_damping(table, mats, mass, constraints, scale=cloud.diameter)
    state = SimState.at_rest(mass, dt, c)
    T = constraints.duration
    log.info("dt = %.3e s (critical %.3e), c = %.3e 1/s, T = %.3e s", dt, dt_crit, c, T)

    history = []
    snapshots = []
    calm = 0
    status, message = NOT_CONVERGED, "step budget exhausted"
    def record(inc):
        history.append((state.step, state.t, state.kinetic_proxy(), inc))

    record(0.0)
    if on_snapshot and settings.snapshot_every:
        snapshots.append(on_snapshot(state))
    try:
        while state.step < settings.max_steps:
            step(state, table, mats, constraints, "dynamic_relaxation", settings.workers, settings.deterministic)
            inc = _max_increment(state)
            if state.step % settings.record_every == 0:
                record(inc)
            if on_snapshot and settings.snapshot_every and state.step % settings.snapshot_every == 0:
                snapshots.append(on_snapshot(state))
            if state.t >= T:
                calm = calm + 1 if inc < settings.tol_u else 0
                if calm >= settings.settle_steps:
                    status, message = CONVERGED, f"converged after {state.step} steps"
                    break
    except DivergenceError as exc:
        status, message = DIVERGED, str(exc)
    except InvertedElementError as exc:
        status, message = INVERTED, str(exc)
    if not history or history[-1][0] != state.step:
        record(_max_increment(state))
    if on_snapshot and settings.snapshot_every:
        snapshots.append(on_snapshot(state))
    log.info("%s: %s", status, message)
    return RunResult(status, state, history, dt, dt_crit, c, T, message, snapshots)


def jacobians(table: ShapeTable, u):
    """det F at every Gauss point."""
    grad = (table.Dstack @ u).reshape(-1, 3, 3)
    return np.linalg.det(np.swapaxes(grad, 1, 2) + np.eye(3))
