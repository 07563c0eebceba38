"""Compressible neo-Hookean material.

W = mu/2 (I1_bar - 3) + kappa/2 (J - 1)^2 with I1_bar = J^(-2/3) tr(C).
All stress routines accept a single 3x3 F or a stack of shape (n, 3, 3).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvertedElementError


@dataclass(frozen=True)
class MaterialParams:
    E: float
    nu: float
    rho: float

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError(f"Young's modulus must be positive, got {self.E}")
        if not -1.0 < self.nu < 0.5:
            raise ValueError(f"Poisson ratio must lie in (-1, 0.5), got {self.nu}")
        if not self.rho > 0:
            raise ValueError(f"density must be positive, got {self.rho}")

    @property
    def mu(self):
        """Shear modulus."""
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def kappa(self):
        """Bulk modulus."""
        return self.E / (3.0 * (1.0 - 2.0 * self.nu))

    @property
    def lame_lambda(self):
        return self.kappa - 2.0 * self.mu / 3.0

    @property
    def dilatational_wave_speed(self):
        return float(np.sqrt((self.lame_lambda + 2.0 * self.mu) / self.rho))


def _check_jacobian(J, ids=None, step=None):
    bad = np.flatnonzero(~(J > 0))
    if bad.size:
        k = int(bad[0])
        pid = ids[k] if ids is not None else k
        raise InvertedElementError(pid, J.flat[k], step)


def strain_energy(F, params: MaterialParams):
    F = np.asarray(F, dtype=float)
    J = np.linalg.det(F)
    _check_jacobian(np.atleast_1d(J))
    trC = np.einsum("...ij,...ij->...", F, F)
    I1bar = J ** (-2.0 / 3.0) * trC
    return 0.5 * params.mu * (I1bar - 3.0) + 0.5 * params.kappa * (J - 1.0) ** 2


def strain_energy_C(C, params: MaterialParams):
    """Same energy written as a function of the right Cauchy-Green tensor."""
    C = np.asarray(C, dtype=float)
    J = np.sqrt(np.linalg.det(C))
    I1bar = J ** (-2.0 / 3.0) * np.trace(C, axis1=-2, axis2=-1)
    return 0.5 * params.mu * (I1bar - 3.0) + 0.5 * params.kappa * (J - 1.0) ** 2


def _det3(A):
    return (A[:, 0, 0] * (A[:, 1, 1] * A[:, 2, 2] - A[:, 1, 2] * A[:, 2, 1])
            - A[:, 0, 1] * (A[:, 1, 0] * A[:, 2, 2] - A[:, 1, 2] * A[:, 2, 0])
            + A[:, 0, 2] * (A[:, 1, 0] * A[:, 2, 1] - A[:, 1, 1] * A[:, 2, 0]))


def _sym_adjugate(C):
    """Adjugate of a stack of symmetric 3x3 matrices."""
    a, b, c = C[:, 0, 0], C[:, 1, 1], C[:, 2, 2]
    d, e, f = C[:, 0, 1], C[:, 1, 2], C[:, 0, 2]
    adj = np.empty_like(C)
    adj[:, 0, 0] = b * c - e * e
    adj[:, 1, 1] = a * c - f * f
    adj[:, 2, 2] = a * b - d * d
    adj[:, 0, 1] = adj[:, 1, 0] = f * e - d * c
    adj[:, 0, 2] = adj[:, 2, 0] = d * e - f * b
    adj[:, 1, 2] = adj[:, 2, 1] = d * f - a * e
    return adj


def second_pk_stress(F, params: MaterialParams, mu=None, kappa=None, ids=None, step=None):
    """S = 2 dW/dC = mu J^(-2/3) (I - tr(C)/3 C^-1) + kappa J (J - 1) C^-1.

    ``mu``/``kappa`` may be per-point arrays overriding ``params`` (multi-region
    grids); ``ids``/``step`` only decorate the inversion error.
    """
    F = np.asarray(F, dtype=float)
    single = F.ndim == 2
    F = F.reshape(-1, 3, 3)
    mu = params.mu if mu is None else np.asarray(mu)[:, None, None]
    kappa = params.kappa if kappa is None else np.asarray(kappa)[:, None, None]
    J = _det3(F)
    _check_jacobian(J, ids, step)
    C = np.einsum("nki,nkj->nij", F, F)
    C = 0.5 * (C + np.swapaxes(C, 1, 2))
    # C^-1 = adj(C) / J^2, symmetric by construction
    Cinv = _sym_adjugate(C) / (J * J)[:, None, None]
    trC = np.einsum("nii->n", C)[:, None, None]
    Jb = J[:, None, None]
    S = (kappa * Jb * (Jb - 1.0) - mu * Jb ** (-2.0 / 3.0) * trC / 3.0) * Cinv
    S += mu * Jb ** (-2.0 / 3.0) * np.eye(3)
    return S[0] if single else S


def cauchy_stress(F, params: MaterialParams):
    """Push-forward sigma = J^-1 F S F^T."""
    F = np.asarray(F, dtype=float)
    S = second_pk_stress(F, params)
    J = np.linalg.det(F)
    return np.einsum("...ik,...kl,...jl->...ij", F, S, F) / np.asarray(J)[..., None, None]


def principal_cauchy_uniaxial(stretch, J, params: MaterialParams):
    """Lateral and axial principal Cauchy stresses (sigma11 = sigma22, sigma33)."""
    mu, k = params.mu, params.kappa
    lat = mu / (3.0 * J ** (5.0 / 3.0)) * (J / stretch - stretch ** 2) + k * (J - 1.0)
    axial = 2.0 * mu / (3.0 * J ** (5.0 / 3.0)) * (stretch ** 2 - J / stretch) + k * (J - 1.0)
    return lat, axial
