"""Moving least squares shape functions (MLS, MMLS and interpolating MMLS).

Shape functions are evaluated in a basis centred on the evaluation point and
scaled by the support radius, ``xi = (x_i - x) / r_SD``.  For complete
polynomial bases this leaves the MLS shape functions unchanged; it only makes
the moment matrix dimensionless, which is what the default penalty scaling
relies on.  Derivatives treat the centre as fixed, so the basis values of the
support nodes are constants and only the weights move with x.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .cloud import NodeCloud, SupportQueryResult, find_support, find_supports
from .errors import SingularMomentError

log = logging.getLogger(__name__)

EPS_MACHINE_SQRT = float(np.sqrt(np.finfo(float).eps))
SINGULAR_RCOND = 1e-13
CHUNK = 2048

QUADRATIC_TERMS = ("1", "x", "y", "z", "x2", "y2", "z2", "xy", "xz", "yz")
LINEAR_TERMS = ("1", "x", "y", "z")


# ---------------------------------------------------------------------------
# basis

def basis_size(kind):
    return {"linear": 4, "quadratic": 10}[kind]


def basis_values(xi, kind="quadratic"):
    """Monomials [1, x, y, z, x^2, y^2, z^2, xy, xz, yz] (truncated for linear)."""
    xi = np.asarray(xi, dtype=float)
    x, y, z = xi[..., 0], xi[..., 1], xi[..., 2]
    one = np.ones_like(x)
    cols = [one, x, y, z]
    if kind == "quadratic":
        cols += [x * x, y * y, z * z, x * y, x * z, y * z]
    elif kind != "linear":
        raise ValueError(f"unknown basis {kind!r}")
    return np.stack(cols, axis=-1)


def basis_gradient(xi, kind="quadratic"):
    """d p / d xi_k with shape (..., m, 3)."""
    xi = np.asarray(xi, dtype=float)
    x, y, z = xi[..., 0], xi[..., 1], xi[..., 2]
    zero, one = np.zeros_like(x), np.ones_like(x)
    rows = [
        [zero, zero, zero],
        [one, zero, zero],
        [zero, one, zero],
        [zero, zero, one],
    ]
    if kind == "quadratic":
        rows += [
            [2 * x, zero, zero],
            [zero, 2 * y, zero],
            [zero, zero, 2 * z],
            [y, x, zero],
            [z, zero, x],
            [zero, z, y],
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def constraint_matrix(mu, dim=3):
    """Penalty matrix H: zero except diag(mu) on the second-degree block."""
    mu = np.asarray(mu, dtype=float)
    n_lin = dim + 1
    n_quad = dim * (dim + 1) // 2
    if mu.shape != (n_quad,):
        raise ValueError(f"expected {n_quad} penalties for dim={dim}, got shape {mu.shape}")
    if np.any(mu < 0):
        raise ValueError("constraint penalties must be non-negative")
    H = np.zeros((n_lin + n_quad, n_lin + n_quad))
    H[n_lin:, n_lin:] = np.diag(mu)
    return H


# ---------------------------------------------------------------------------
# weights

def weight_regularized(r, r_sd, eps=1e-5):
    """Regularized weight; 1 at r = 0, 0 for r >= r_SD."""
    s = (np.asarray(r, dtype=float) / r_sd) ** 2
    w, _ = _regularized(s, eps)
    return w if np.ndim(w) else float(w)


def _regularized(s, eps):
    denom = eps ** -2 - (1.0 + eps) ** -2
    inside = s < 1.0
    se = s + eps
    w = np.where(inside, (se ** -2 - (1.0 + eps) ** -2) / denom, 0.0)
    dw = np.where(inside, -2.0 * se ** -3 / denom, 0.0)
    return w, dw


def _exponential(s, shape):
    # c = r_SD / shape  =>  (r / c)^2 = shape^2 * s
    a = shape * shape
    tail = np.exp(-a)
    inside = s < 1.0
    e = np.exp(-a * s)
    w = np.where(inside, (e - tail) / (1.0 - tail), 0.0)
    dw = np.where(inside, -a * e / (1.0 - tail), 0.0)
    return w, dw


def weight_exponential(r, r_sd, shape=3.0):
    """Truncated Gaussian weight, kept only for comparison plots."""
    s = (np.asarray(r, dtype=float) / r_sd) ** 2
    w, _ = _exponential(s, shape)
    return w if np.ndim(w) else float(w)


# ---------------------------------------------------------------------------
# parameters and results

@dataclass
class ApproxParams:
    basis: str = "quadratic"
    weight: str = "regularized"
    eps: float = 1e-5
    exp_shape: float = 3.0
    n_min: int = 10
    support_factor: float = 1.8
    mu_scale: float = 1e-5
    mu: tuple | None = None
    # grow r_SD past n_min while r_SD * max|grad phi| exceeds this (0 disables)
    max_gradient: float = 8.0
    max_growth: float = 2.0

    def __post_init__(self):
        if self.basis not in ("linear", "quadratic"):
            raise ValueError(f"unknown basis {self.basis!r}")
        if self.weight not in ("regularized", "exponential"):
            raise ValueError(f"unknown weight {self.weight!r}")
        if self.weight == "regularized":
            if not 0 < self.eps < 1:
                raise ValueError("regularization parameter must lie in (0, 1)")
            if self.eps <= EPS_MACHINE_SQRT:
                warnings.warn(
                    f"eps = {self.eps:g} is below sqrt(machine precision) = {EPS_MACHINE_SQRT:.2e}; "
                    "shape functions may be numerically unstable",
                    RuntimeWarning,
                    stacklevel=2,
                )
        if self.mu is not None:
            self.mu = tuple(float(m) for m in self.mu)
            if len(self.mu) != 6 or min(self.mu) < 0:
                raise ValueError("mu must be six non-negative penalties")
        if self.mu_scale < 0:
            raise ValueError("mu_scale must be non-negative")

    @property
    def m(self):
        return basis_size(self.basis)

    @property
    def penalized(self):
        """True when every second-degree penalty is strictly positive."""
        if self.basis != "quadratic":
            return False
        if self.mu is not None:
            return min(self.mu) > 0
        return self.mu_scale > 0

    def weights(self, s):
        if self.weight == "regularized":
            return _regularized(s, self.eps)
        return _exponential(s, self.exp_shape)


@dataclass
class ShapeEval:
    ids: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray | None
    rcond: float
    r_sd: float = 0.0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["node_id", "phi", "dphidx", "dphidy", "dphidz"])
            dphi = self.dphi if self.dphi is not None else np.full((len(self.ids), 3), np.nan)
            for i, p, g in zip(self.ids, self.phi, dphi):
                wr.writerow([int(i), repr(float(p)), *(repr(float(v)) for v in g)])


@dataclass
class ShapeBatch:
    """Padded shape data for many evaluation points; padding has id -1 and phi 0."""

    ids: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray | None
    rcond: np.ndarray
    r_sd: np.ndarray
    fallback: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.ids)

    def at(self, k) -> ShapeEval:
        keep = self.ids[k] >= 0
        dphi = self.dphi[k][keep] if self.dphi is not None else None
        return ShapeEval(self.ids[k][keep], self.phi[k][keep], dphi, float(self.rcond[k]), float(self.r_sd[k]))


# ---------------------------------------------------------------------------
# core evaluation

def _pad(supports, coords, points, radii):
    K = max(len(s) for s in supports)
    n = len(supports)
    ids = np.full((n, K), -1, dtype=np.int64)
    for k, s in enumerate(supports):
        ids[k, : len(s)] = s
    mask = ids >= 0
    xi = (coords[np.where(mask, ids, 0)] - points[:, None, :]) / radii[:, None, None]
    xi[~mask] = 0.0
    return ids, mask, xi


def _penalties(A, params):
    n = len(A)
    m = params.m
    if params.basis != "quadratic":
        return np.zeros((n, m))
    diag = np.zeros((n, m))
    if params.mu is not None:
        diag[:, 4:] = params.mu
    else:
        scale = params.mu_scale * np.trace(A, axis1=1, axis2=2) / m
        diag[:, 4:] = scale[:, None]
    return diag


def _scaled_inverse(M):
    """Inverse via Jacobi scaling; returns (inverse, rcond of the scaled matrix).

    Rows with a zero diagonal get rcond 0 and are left for the caller.
    """
    d = np.einsum("nii->ni", M)
    ok = np.all(d > 0, axis=1)
    rcond = np.zeros(len(M))
    inv = np.zeros_like(M)
    if ok.any():
        s = 1.0 / np.sqrt(d[ok])
        S = M[ok] * s[:, :, None] * s[:, None, :]
        ev = np.linalg.eigvalsh(S)
        rcond[ok] = ev[:, 0] / ev[:, -1]
        good = rcond[ok] >= SINGULAR_RCOND
        idx = np.flatnonzero(ok)[good]
        sg = s[good]
        inv[idx] = np.linalg.inv(S[good]) * sg[:, :, None] * sg[:, None, :]
    return inv, rcond


def _pseudo_inverse(M):
    """Rank-truncated inverse of a symmetric PSD matrix after Jacobi scaling."""
    d = np.diag(M).copy()
    live = d > 0
    out = np.zeros_like(M)
    if not live.any():
        return out
    s = 1.0 / np.sqrt(d[live])
    sub = M[np.ix_(live, live)] * s[:, None] * s[None, :]
    out[np.ix_(live, live)] = np.linalg.pinv(sub, rcond=1e-12, hermitian=True) * s[:, None] * s[None, :]
    return out


def _evaluate_chunk(points, supports, radii, coords, params, gradients):
    ids, mask, xi = _pad(supports, coords, points, radii)
    s = np.einsum("nkd,nkd->nk", xi, xi)
    w, dws = params.weights(s)
    w = np.where(mask, w, 0.0)
    # nodes on or beyond the support boundary carry no weight
    mask &= w > 0
    ids = np.where(mask, ids, -1)
    w = np.where(mask, w, 0.0)
    P = basis_values(xi, params.basis) * mask[..., None]         # (n, K, m)
    A = np.einsum("nk,nki,nkj->nij", w, P, P)
    pen = _penalties(A, params)
    M = A.copy()
    M[:, np.arange(params.m), np.arange(params.m)] += pen

    Minv, rcond = _scaled_inverse(M)
    singular = rcond < SINGULAR_RCOND
    if singular.any():
        if not params.penalized:
            k = int(np.flatnonzero(singular)[0])
            raise SingularMomentError(points[k])
        for k in np.flatnonzero(singular):
            Minv[k] = _pseudo_inverse(M[k])

    gamma = Minv[:, 0, :]                                          # p(0) = e0
    gp = np.einsum("nm,nkm->nk", gamma, P)
    phi = w * gp
    dphi = None
    if gradients:
        # d w / d x_k = w'(s) * ds/dx_k with s = |x_i - x|^2 / r^2
        dw = np.where(mask, dws, 0.0)[..., None] * (-2.0 * xi / radii[:, None, None])
        dA = np.einsum("nkd,nki,nkj->ndij", dw, P, P)
        if params.basis == "quadratic" and params.mu is None:
            # default penalties follow trace(A) of the basis centred at x, which
            # moves with x through both the weights and the shifted monomials
            dP = basis_gradient(xi, params.basis) * mask[..., None, None]
            dtr = np.einsum("nkd,nk->nd", dw, np.einsum("nkm,nkm->nk", P, P))
            dtr -= 2.0 * np.einsum("nk,nkm,nkmd->nd", w, P, dP) / radii[:, None]
            dmu = params.mu_scale * dtr / params.m
            q = np.arange(4, params.m)
            dA[:, :, q, q] += dmu[:, :, None]
        eta = np.einsum("nij,ndjl,nl->ndi", Minv, dA, gamma)
        lin = np.einsum("ndm,nkm->nkd", Minv[:, 1:4, :], P) / radii[:, None, None]
        dphi = (
            w[..., None] * lin
            - w[..., None] * np.einsum("ndm,nkm->nkd", eta, P)
            + dw * gp[..., None]
        )
        dphi = _enforce_gradient_consistency(dphi, xi, mask, radii)
    return ids, phi, dphi, rcond, singular


def _enforce_gradient_consistency(dphi, xi, mask, radii):
    """Remove the round-off part of sum grad phi = 0 and sum grad phi (x_i - x) = I.

    The steep regularized weight amplifies rounding in the derivative terms to
    about 1e-8 relative; the minimum-norm correction restoring the two linear
    identities changes nothing above that level.  Supports too flat to pin
    down the linear field are left untouched.
    """
    Q = np.concatenate([mask[..., None].astype(float), xi * mask[..., None]], axis=-1)   # (n, K, 4)
    target = np.zeros((len(Q), 4, 3))
    target[:, 1:, :] = np.eye(3) / radii[:, None, None]
    R = np.einsum("nkq,nkd->nqd", Q, dphi) - target
    G = np.einsum("nkq,nkr->nqr", Q, Q)
    ev = np.linalg.eigvalsh(G)
    ok = ev[:, 0] > 1e-8 * ev[:, -1]
    if ok.any():
        coef = np.linalg.solve(G[ok], R[ok])
        dphi[ok] -= np.einsum("nkq,nqd->nkd", Q[ok], coef)
    return dphi


def shape_batch(points, supports, radii, cloud: NodeCloud, params: ApproxParams, gradients=True):
    """Shape functions at many points with given supports (list of id arrays, radii)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    radii = np.asarray(radii, dtype=float).reshape(-1)
    n = len(points)
    K = max(len(s) for s in supports) if n else 0
    ids = np.full((n, K), -1, dtype=np.int64)
    phi = np.zeros((n, K))
    dphi = np.zeros((n, K, 3)) if gradients else None
    rcond = np.zeros(n)
    fallback = np.zeros(n, dtype=bool)
    for lo in range(0, n, CHUNK):
        hi = min(n, lo + CHUNK)
        c_ids, c_phi, c_dphi, c_rc, c_fb = _evaluate_chunk(
            points[lo:hi], supports[lo:hi], radii[lo:hi], cloud.coords, params, gradients
        )
        k = c_ids.shape[1]
        ids[lo:hi, :k] = c_ids
        phi[lo:hi, :k] = c_phi
        if gradients:
            dphi[lo:hi, :k] = c_dphi
        rcond[lo:hi] = c_rc
        fallback[lo:hi] = c_fb
    if fallback.any():
        log.info("%d of %d evaluation points solved by rank-truncated inverse", fallback.sum(), n)
    return ShapeBatch(ids, phi, dphi, rcond, radii, fallback)


def shape_mmls(x, support: SupportQueryResult, cloud: NodeCloud, params: ApproxParams | None = None,
               gradients=True) -> ShapeEval:
    """Shape functions and reference gradients at a single point."""
    params = params or ApproxParams()
    x = np.asarray(x, dtype=float).reshape(1, 3)
    batch = shape_batch(x, [np.asarray(support.ids)], [support.r_sd], cloud, params, gradients)
    return batch.at(0)


def _patch(batch: ShapeBatch, rows, sub: ShapeBatch):
    """Overwrite rows of a padded batch with a re-evaluated subset."""
    K = max(batch.ids.shape[1], sub.ids.shape[1])
    if K > batch.ids.shape[1]:
        extra = K - batch.ids.shape[1]
        batch.ids = np.pad(batch.ids, ((0, 0), (0, extra)), constant_values=-1)
        batch.phi = np.pad(batch.phi, ((0, 0), (0, extra)))
        if batch.dphi is not None:
            batch.dphi = np.pad(batch.dphi, ((0, 0), (0, extra), (0, 0)))
    k = sub.ids.shape[1]
    batch.ids[rows] = -1
    batch.phi[rows] = 0.0
    batch.ids[rows, :k] = sub.ids
    batch.phi[rows, :k] = sub.phi
    if batch.dphi is not None:
        batch.dphi[rows] = 0.0
        batch.dphi[rows, :k] = sub.dphi
    batch.rcond[rows] = sub.rcond
    batch.r_sd[rows] = sub.r_sd
    batch.fallback[rows] = sub.fallback


def _gradient_scale(batch: ShapeBatch):
    return np.abs(batch.dphi).max(axis=(1, 2)) * batch.r_sd


def adaptive_shapes(points, cloud: NodeCloud, params: ApproxParams | None = None):
    """Supports and shape data, growing r_SD (x1.2, up to max_growth) wherever
    r_SD * max|grad phi| exceeds ``max_gradient``.

    Near-degenerate supports (for instance only two node layers inside the
    ball) leave a second-degree direction controlled by the small penalty
    alone; the resulting shape functions are steep and limit the stable time
    step.  Returns (supports, radii, batch with gradients).
    """
    params = params or ApproxParams()
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    supports, radii = find_supports(points, cloud, params.n_min, params.support_factor)
    batch = shape_batch(points, supports, radii, cloud, params, gradients=True)
    if params.max_gradient <= 0 or params.max_growth <= 1:
        return supports, radii, batch
    limit = radii * params.max_growth * (1 + 1e-12)
    radii = radii.copy()
    todo = np.flatnonzero(_gradient_scale(batch) > params.max_gradient)
    while True:
        todo = todo[radii[todo] * 1.2 <= limit[todo]]
        if not todo.size:
            break
        radii[todo] *= 1.2
        found = cloud.tree.query_ball_point(points[todo], radii[todo])
        for k, ids in zip(todo, found):
            supports[k] = np.sort(np.asarray(ids, dtype=np.int64))
        sub = shape_batch(points[todo], [supports[k] for k in todo], radii[todo], cloud, params, True)
        _patch(batch, todo, sub)
        todo = todo[_gradient_scale(sub) > params.max_gradient]
    return supports, radii, batch


def shape_at_points(points, cloud: NodeCloud, params: ApproxParams | None = None, gradients=True) -> ShapeBatch:
    """Find (adaptive) supports and evaluate shape functions at each point."""
    _, _, batch = adaptive_shapes(points, cloud, params)
    if not gradients:
        batch.dphi = None
    return batch


# ---------------------------------------------------------------------------
# classical MLS in the raw monomial basis (independent reference route)

def shape_mls(x, support: SupportQueryResult, cloud: NodeCloud, params: ApproxParams | None = None):
    """phi = p(x)^T A^-1 B with A = P W P^T, no penalty, absolute coordinates."""
    params = params or ApproxParams()
    x = np.asarray(x, dtype=float)
    nodes = cloud.coords[support.ids]
    r = np.linalg.norm(nodes - x, axis=1)
    w, _ = params.weights((r / support.r_sd) ** 2)
    keep = w > 0
    nodes, w, ids = nodes[keep], w[keep], np.asarray(support.ids)[keep]
    P = basis_values(nodes, params.basis).T                  # (m, n)
    A = (P * w) @ P.T
    B = P * w
    try:
        coef = np.linalg.solve(A, B)
    except np.linalg.LinAlgError:
        raise SingularMomentError(x) from None
    phi = basis_values(x, params.basis) @ coef
    return ids, phi


# ---------------------------------------------------------------------------
# audits

@dataclass
class KroneckerAudit:
    node_ids: np.ndarray
    deviation: np.ndarray
    bound: np.ndarray

    @property
    def max_deviation(self):
        return float(self.deviation.max()) if self.deviation.size else 0.0

    @property
    def worst_ratio(self):
        """max over samples of deviation / bound (inf if a bound is zero with nonzero deviation)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(self.bound > 0, self.deviation / self.bound, np.where(self.deviation > 0, np.inf, 0.0))
        return float(r.max()) if r.size else 0.0


def interpolation_bound(r_min, r_sd, eps):
    """Approximate max |w_i(x_j) - delta_ij| over a support."""
    return ((r_min / r_sd) ** -4 - 1.0) * eps ** 2


def kronecker_audit(cloud: NodeCloud, n_sample=50, params: ApproxParams | None = None, seed=0, node_ids=None):
    """Evaluate shape functions at sampled nodes and measure max |phi_i(x_j) - delta_ij|."""
    params = params or ApproxParams()
    if node_ids is None:
        rng = np.random.default_rng(seed)
        n_sample = min(n_sample, len(cloud))
        node_ids = np.sort(rng.choice(len(cloud), size=n_sample, replace=False))
    node_ids = np.asarray(node_ids, dtype=np.int64)
    pts = cloud.coords[node_ids]
    batch = shape_at_points(pts, cloud, params, gradients=False)
    dev = np.zeros(len(node_ids))
    bound = np.zeros(len(node_ids))
    for k, j in enumerate(node_ids):
        ev = batch.at(k)
        delta = (ev.ids == j).astype(float)
        dev[k] = np.abs(ev.phi - delta).max() if ev.ids.size else 0.0
        sup = cloud.coords[ev.ids]
        if len(sup) > 1:
            diff = sup[:, None, :] - sup[None, :, :]
            d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
            r_min = d[np.triu_indices(len(sup), 1)].min()
            bound[k] = interpolation_bound(r_min, ev.r_sd, params.eps)
    return KroneckerAudit(node_ids, dev, bound)


def gradient_check(x, support: SupportQueryResult, cloud: NodeCloud, params: ApproxParams | None = None,
                   step=None):
    """Worst discrepancy between analytic and central-difference shape gradients.

    Normalised by the largest analytic gradient component at x.
    """
    params = params or ApproxParams()
    x = np.asarray(x, dtype=float)
    h = step if step is not None else 1e-6 * support.r_sd
    base = shape_mmls(x, support, cloud, params, gradients=True)
    pts = np.vstack([x + sgn * h * e for e in np.eye(3) for sgn in (1.0, -1.0)])
    batch = shape_batch(pts, [np.asarray(support.ids)] * 6, [support.r_sd] * 6, cloud, params, gradients=False)
    fd = np.zeros((len(base.ids), 3))
    for k in range(3):
        plus = dict(zip(batch.at(2 * k).ids, batch.at(2 * k).phi))
        minus = dict(zip(batch.at(2 * k + 1).ids, batch.at(2 * k + 1).phi))
        fd[:, k] = [(plus.get(i, 0.0) - minus.get(i, 0.0)) / (2 * h) for i in base.ids]
    scale = np.abs(base.dphi).max()
    return float(np.abs(fd - base.dphi).max() / scale) if scale > 0 else float(np.abs(fd).max())


def support_for(x, cloud, params: ApproxParams | None = None):
    """Adaptive support of a single point."""
    params = params or ApproxParams()
    supports, radii, _ = adaptive_shapes(np.reshape(x, (1, 3)), cloud, params)
    return SupportQueryResult(supports[0], float(radii[0]))
