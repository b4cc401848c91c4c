"""Discrete weighted Sobolev norms and the embedding constants."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable

import numpy as np

from .core_model import DiffusionCoefficient, Grid, truncated_endpoint_integral, xi_interpolant
from .sturm_liouville import divergence, face_coefficients


@dataclass
class NormBundle:
    l2: float
    seminorm_1a: float
    norm_1a: float
    lp: dict = field(default_factory=dict)


@dataclass
class TrajectoryNorms:
    b_norm: float
    h_norm: float
    sup_l2: float
    dissipation: float
    # sup_t (||u(t)||^2 + 2 int_0^t |u|_{1,a}^2)^(1/2), the quantity energy
    # arguments control stamp by stamp
    running_energy: float = 0.0


def lp_norm(u: np.ndarray, p: float, h: float | None = None) -> float:
    h = Grid.for_field(u).h if h is None else h
    return float((h * np.sum(np.abs(u) ** p)) ** (1.0 / p))


def seminorm_sq(u: np.ndarray, a: DiffusionCoefficient, grid: Grid | None = None) -> np.ndarray:
    """|u|_{1,a}^2 over interior faces; vectorised over leading axes."""
    grid = grid or Grid.for_field(u)
    af = face_coefficients(a, grid)[1:-1]
    du = (u[..., 1:] - u[..., :-1]) / grid.h
    return grid.h * np.sum(af * du**2, axis=-1)


def norms(u: np.ndarray, a: DiffusionCoefficient, ps: Iterable[float] = ()) -> NormBundle:
    u = np.asarray(u, dtype=float)
    grid = Grid.for_field(u)
    l2 = grid.norm(u)
    semi = math.sqrt(float(seminorm_sq(u, a, grid)))
    return NormBundle(l2=l2, seminorm_1a=semi, norm_1a=math.sqrt(l2**2 + semi**2),
                      lp={p: lp_norm(u, p, grid.h) for p in ps})


def trajectory_norms(traj, a: DiffusionCoefficient) -> TrajectoryNorms:
    """B(Q_T) and H(Q_T) norms of a recorded trajectory.

    Time integrals use the trapezoid rule over the recorded stamps, u_t is a
    forward difference between consecutive stamps.
    """
    states = np.asarray(traj.states, dtype=float)
    if states.shape[0] < 2:
        raise ValueError("trajectory needs at least two time samples")
    dts = np.asarray(traj.dts, dtype=float)
    grid = Grid.for_field(states[0])
    h = grid.h
    l2sq = h * np.sum(states**2, axis=1)
    semi = seminorm_sq(states, a, grid)
    sup_l2 = math.sqrt(float(np.max(l2sq)))
    diss_t = 2.0 * np.concatenate([[0.0], np.cumsum(0.5 * dts * (semi[1:] + semi[:-1]))])
    dissipation = float(diss_t[-1])
    b_norm = math.sqrt(sup_l2**2 + dissipation)
    running = math.sqrt(float(np.max(l2sq + diss_t)))

    ut = np.diff(states, axis=0) / dts[:, None]
    ut_int = float(np.sum(dts * h * np.sum(ut**2, axis=1)))
    lap = divergence(face_coefficients(a, grid), states, h)
    lap_sq = h * np.sum(lap**2, axis=1)
    lap_int = float(np.sum(0.5 * dts * (lap_sq[1:] + lap_sq[:-1])))
    h_norm = math.sqrt(float(np.max(l2sq + semi)) + ut_int + lap_int)
    return TrajectoryNorms(b_norm=b_norm, h_norm=h_norm, sup_l2=sup_l2, dissipation=dissipation,
                           running_energy=running)


def spacetime_lp_norm(traj, p: float) -> float:
    """||u||_{L^p(Q_T)} with midpoint in space and trapezoid in time."""
    states = np.asarray(traj.states, dtype=float)
    h = Grid.for_field(states[0]).h
    slab = h * np.sum(np.abs(states) ** p, axis=1)
    return float(np.sum(0.5 * traj.dts * (slab[1:] + slab[:-1])) ** (1.0 / p))


class XiNotIntegrable(ValueError):
    pass


@lru_cache(maxsize=32)
def _embedding_constant_cached(a: DiffusionCoefficient) -> float:
    xi = a.xi if a.xi_a_closed_form is not None else xi_interpolant(a)
    val, ok = truncated_endpoint_integral(lambda x: math.sqrt(abs(float(xi(x)))))
    if not ok:
        raise XiNotIntegrable("xi_a not integrable enough")
    return 0.5 * val


def embedding_constant(a: DiffusionCoefficient) -> float:
    """c_a = (1/2) int_{-1}^{1} sqrt|xi_a(x)| dx."""
    return _embedding_constant_cached(a)


def embedding_bound(a: DiffusionCoefficient) -> float:
    return 2.0 * max(embedding_constant(a), math.sqrt(2.0) / 2.0)


def embedding_ratio(u: np.ndarray, a: DiffusionCoefficient, p: float, tol_disc: float = 0.05):
    """Return ``(ratio, bound, passed)`` for ||u||_{L^{2p}} <= bound ||u||_{1,a}."""
    if p < 1:
        raise ValueError("p >= 1 required")
    nb = norms(u, a, ps=(2 * p,))
    if nb.norm_1a <= 0:
        raise ValueError("zero field has no embedding ratio")
    bound = embedding_bound(a)
    ratio = nb.lp[2 * p] / nb.norm_1a
    return ratio, bound, bool(ratio <= bound * (1 + tol_disc))


def positive_negative_parts(u: np.ndarray):
    u = np.asarray(u, dtype=float)
    return np.maximum(u, 0.0), np.maximum(-u, 0.0)
