"""Discrete degenerate operator A = (a u_x)_x + alpha and its spectrum."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy import linalg

from .core_model import DiffusionCoefficient, Grid


class EigenError(RuntimeError):
    pass


class TargetNotPositive(ValueError):
    pass


@dataclass(frozen=True)
class OperatorMatrix:
    """Symmetric tridiagonal matrix of A on a grid."""

    diag: np.ndarray
    offdiag: np.ndarray
    grid: Grid
    alpha: np.ndarray

    def matvec(self, u: np.ndarray) -> np.ndarray:
        out = self.diag * u
        out[:-1] += self.offdiag * u[1:]
        out[1:] += self.offdiag * u[:-1]
        return out

    def dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.offdiag, 1) + np.diag(self.offdiag, -1)


def face_coefficients(a: DiffusionCoefficient, grid: Grid) -> np.ndarray:
    """a at the faces with the two boundary faces forced to zero flux."""
    af = a.at_faces(grid).copy()
    af[0] = af[-1] = 0.0
    return af


def divergence(a_faces: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    """Conservative (a u_x)_x with zero boundary flux."""
    flux = a_faces[1:-1] * (u[..., 1:] - u[..., :-1]) / h
    out = np.zeros_like(u, dtype=float)
    out[..., :-1] += flux / h
    out[..., 1:] -= flux / h
    return out


def assemble(a: DiffusionCoefficient, alpha, grid: Grid) -> OperatorMatrix:
    af = face_coefficients(a, grid)
    h2 = grid.h**2
    alpha = np.zeros(grid.n_cells) if alpha is None else np.broadcast_to(np.asarray(alpha, dtype=float), (grid.n_cells,)).copy()
    diag = -(af[:-1] + af[1:]) / h2 + alpha
    return OperatorMatrix(diag=diag, offdiag=af[1:-1] / h2, grid=grid, alpha=alpha)


@dataclass(frozen=True)
class EigenBasis:
    """Eigenpairs of -A: lambdas ascending, omegas[k] orthonormal in h-weighted l2."""

    lambdas: np.ndarray
    omegas: np.ndarray
    grid: Grid

    def coefficients(self, u: np.ndarray) -> np.ndarray:
        return self.grid.h * (self.omegas @ u)

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        return coeffs @ self.omegas

    def shifted(self, c: float) -> "EigenBasis":
        """Basis of A + c: eigenvalues of -A move by -c."""
        return EigenBasis(self.lambdas - c, self.omegas, self.grid)


def eigen(m: OperatorMatrix) -> EigenBasis:
    try:
        lam, vecs = linalg.eigh_tridiagonal(-m.diag, -m.offdiag, lapack_driver="stev")
    except linalg.LinAlgError as exc:
        raise EigenError(f"tridiagonal eigensolver did not converge (n={len(m.diag)}): {exc}") from exc
    omegas = vecs.T / math.sqrt(m.grid.h)
    idx = np.argmax(np.abs(omegas), axis=1)
    signs = np.sign(omegas[np.arange(len(lam)), idx])
    omegas *= signs[:, None]
    return EigenBasis(lambdas=lam, omegas=omegas, grid=m.grid)


def legendre_reference(k: int, grid: Grid):
    """(mu_k, P_k) for a = 1 - x^2: degree k-1 Legendre polynomial, unit discrete norm.

    The sampled polynomials are only O(h^2) orthogonal under the midpoint
    rule, so P_k is orthogonalised against P_1..P_{k-1} in the discrete inner
    product (a QR of the sampled Legendre Vandermonde).  P_k remains a degree
    k-1 polynomial within O(h^2) of the normalised Legendre one.
    """
    if k < 1:
        raise ValueError("k starts at 1")
    V = npleg.legvander(grid.centers, k - 1) * math.sqrt(grid.h)
    q, r = np.linalg.qr(V)
    p = q[:, -1] * np.sign(r[-1, -1]) / math.sqrt(grid.h)
    return float((k - 1) * k), p


def alpha_star(a: DiffusionCoefficient, v, grid: Optional[Grid] = None,
               dv: Optional[Callable] = None, d2v: Optional[Callable] = None) -> np.ndarray:
    """Potential -(a v_x)_x / v making v the ground state of A_0 + alpha_*.

    With a callable ``v`` plus ``dv``, ``d2v`` the product rule a'v' + a v'' is
    evaluated at the cell centres.  Otherwise ``v`` is taken as cell values and
    the discrete divergence of the operator itself is used, so that v lies
    exactly in the kernel of the discrete A_0 + alpha_*.
    """
    if callable(v):
        if grid is None:
            raise ValueError("callable v needs a grid")
        x = grid.centers
        vals = np.asarray(v(x), dtype=float)
        if dv is not None and d2v is not None:
            _require_positive(vals)
            lap = a.derivative(x) * dv(x) + a(x) * d2v(x)
            return -lap / vals
    else:
        vals = np.asarray(v, dtype=float)
        grid = grid or Grid.for_field(vals)
    _require_positive(vals)
    lap = divergence(face_coefficients(a, grid), vals, grid.h)
    return -lap / vals


def _require_positive(vals):
    if np.min(vals) <= 0:
        raise TargetNotPositive("target not strictly positive")


@dataclass
class GroundStateReport:
    lambda1: float
    lambda2: float
    alignment: float
    rayleigh: float
    omega1_sign_constant: bool
    omega2_sign_changes: bool
    alpha: np.ndarray

    @property
    def passed(self) -> bool:
        return (abs(self.lambda1) <= 1e-6 * self.lambda2 and self.alignment >= 1 - 1e-6
                and self.omega1_sign_constant and self.omega2_sign_changes)


def verify_ground_state(a: DiffusionCoefficient, v: np.ndarray, grid: Optional[Grid] = None) -> GroundStateReport:
    v = np.asarray(v, dtype=float)
    grid = grid or Grid.for_field(v)
    ast = alpha_star(a, v, grid)
    m = assemble(a, ast, grid)
    basis = eigen(m)
    vn = v / grid.norm(v)
    w1, w2 = basis.omegas[0], basis.omegas[1]
    return GroundStateReport(
        lambda1=float(basis.lambdas[0]),
        lambda2=float(basis.lambdas[1]),
        alignment=abs(grid.inner(w1, vn)),
        rayleigh=-grid.inner(m.matvec(vn), vn),
        omega1_sign_constant=bool(np.all(w1 > 0) or np.all(w1 < 0)),
        omega2_sign_changes=bool(np.min(w2) * np.max(w2) < 0),
        alpha=ast,
    )
