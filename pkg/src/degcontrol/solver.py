"""Time integration under piecewise static bilinear control.

Three routes share one stamp schedule so their trajectories can be compared
stamp by stamp:

* ``evolve``        - implicit diffusion and potential, explicit f;
* ``evolve_linear`` - exact eigen-expansion of the linear problem;
* ``evolve_picard`` - fixed point of the mild (variation of constants) map.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import lapack

from .core_model import Grid, PiecewiseStaticControl, ProblemSpec, zero_nonlinearity
from .sturm_liouville import EigenBasis, assemble, eigen
from .weighted_spaces import trajectory_norms


class SolverError(RuntimeError):
    pass


class PicardDivergence(SolverError):
    pass


@dataclass
class SolverConfig:
    dt: float = 1e-3
    mode: str = "imex"
    picard_tol: float = 1e-10
    picard_maxit: int = 60
    linear_solver_tol: float = 1e-10
    stride: int = 32
    # explicit step keeps u + dt f(u) on the same side of zero when
    # dt * gamma0 * |u|^(theta-1) stays below this
    explicit_fraction: float = 0.5

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.mode not in ("imex", "spectral_linear", "picard"):
            raise ValueError(f"unknown solver mode {self.mode!r}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass
class Trajectory:
    """Recorded states.

    ``dts[k]`` is the exact length of the interval between stamps k and k+1
    and is always positive; ``times`` is its running sum and may repeat a
    value when a segment is shorter than the float spacing at its start.
    """

    times: np.ndarray
    dts: np.ndarray
    states: np.ndarray
    breakpoint_indices: list
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def grid(self) -> Grid:
        return Grid.for_field(self.states[0])

    def __sub__(self, other: "Trajectory") -> "Trajectory":
        if self.states.shape != other.states.shape or not np.array_equal(self.dts, other.dts):
            raise ValueError("trajectories are not recorded on the same stamps")
        return Trajectory(self.times, self.dts, self.states - other.states,
                          list(self.breakpoint_indices), {"difference": True})

    def l2_norms(self) -> np.ndarray:
        return np.sqrt(self.grid.h * np.sum(self.states**2, axis=1))


@dataclass
class _Segment:
    index: int
    start: float
    length: float
    n_steps: int
    dt: float
    recorded: np.ndarray  # step counts k at which the state is stored


def _active_segments(control: PiecewiseStaticControl, T: Optional[float]):
    horizon = control.horizon
    if T is None or T >= horizon:
        if T is not None and T > horizon * (1 + 1e-12):
            raise ValueError(f"horizon {T} exceeds control horizon {horizon}")
        return list(control.durations)
    if T <= 0:
        raise ValueError("horizon must be positive")
    out, remaining = [], T
    for d in control.durations:
        take = min(d, remaining)
        out.append(take)
        remaining -= take
        if remaining <= 0:
            break
    return out


def schedule(control: PiecewiseStaticControl, T: Optional[float], cfg: SolverConfig, stride: Optional[int] = None):
    """Per-segment steps; steps never straddle a breakpoint."""
    stride = cfg.stride if stride is None else stride
    segs, start = [], 0.0
    for i, length in enumerate(_active_segments(control, T)):
        ap = float(np.max(np.maximum(control.segment_alpha(i), 0.0)))
        cap = cfg.dt if ap <= 0 else min(cfg.dt, 0.5 / ap)
        n = max(1, math.ceil(length / cap * (1 - 1e-12)))
        rec = np.unique(np.concatenate([np.arange(stride, n, stride), [n]])).astype(int)
        segs.append(_Segment(i, start, length, n, length / n, rec))
        start += length
    return segs


def _spec_hash(spec: ProblemSpec, cfg: SolverConfig) -> str:
    m = hashlib.sha256()
    for arr in (spec.u0, spec.control.durations, spec.control.profiles, spec.control.shifts):
        m.update(np.ascontiguousarray(arr).tobytes())
    m.update(f"{spec.a.name}|{spec.f.name}|{cfg.dt}|{cfg.stride}".encode())
    return m.hexdigest()[:16]


class _Recorder:
    def __init__(self, u0):
        self.times, self.dts, self.states, self.bps = [0.0], [], [np.array(u0, dtype=float)], [0]

    def add(self, t, dt, u):
        self.times.append(t)
        self.dts.append(dt)
        self.states.append(np.array(u, dtype=float))

    def mark_breakpoint(self):
        self.bps.append(len(self.states) - 1)

    def build(self, meta):
        return Trajectory(np.array(self.times), np.array(self.dts), np.array(self.states), self.bps, meta)


# ---------------------------------------------------------------------------
# IMEX

class _ImplicitFactor:
    """LU of I - dt (D + diag(p)) for the LAPACK tridiagonal solver."""

    def __init__(self, op, profile, dt):
        diag = 1.0 - dt * (op.diag + profile)
        off = -dt * op.offdiag
        if dt * float(np.max(np.maximum(profile, 0.0), initial=0.0)) >= 1.0:
            raise SolverError("implicit matrix lost diagonal dominance; use a smaller dt")
        self._fac = lapack.dgttrf(off.copy(), diag, off.copy())
        if self._fac[-1] != 0:
            raise SolverError("tridiagonal factorisation broke down; use a smaller dt")

    def solve(self, rhs):
        dl, d, du, du2, ipiv, _ = self._fac
        x, info = lapack.dgttrs(dl, d, du, du2, ipiv, rhs)
        if info != 0:
            raise SolverError("tridiagonal solve failed; use a smaller dt")
        return x


def _imex_segment(spec, seg, u, rec, cfg, op0):
    grid, f = spec.grid, spec.f
    x = grid.centers
    profile = spec.control.profiles[seg.index]
    shift = float(spec.control.shifts[seg.index])
    factors = {}

    def factor(m):
        if m not in factors:
            factors[m] = (_ImplicitFactor(op0, profile, seg.dt / m), math.exp(shift * seg.dt / m))
        return factors[m]

    growth = f.gamma0 > 0
    k_rec = 0
    rec_iter = iter(seg.recorded)
    next_rec = next(rec_iter)
    for k in range(seg.n_steps):
        t = seg.start + k * seg.dt
        m = 1
        if growth:
            umax = float(np.max(np.abs(u)))
            stiff = seg.dt * f.gamma0 * umax ** (f.theta - 1.0)
            if stiff > cfg.explicit_fraction:
                m = 2 ** math.ceil(math.log2(stiff / cfg.explicit_fraction))
        fac, gain = factor(m)
        sub = seg.dt / m
        for j in range(m):
            rhs = u + sub * np.asarray(f(t + j * sub, x, u), dtype=float)
            u = gain * fac.solve(rhs)
        if k + 1 == next_rec:
            rec.add(seg.start + (k + 1) * seg.dt, (k + 1 - k_rec) * seg.dt, u)
            k_rec = k + 1
            next_rec = next(rec_iter, None)
    return u


def evolve(spec: ProblemSpec, T: Optional[float] = None, cfg: Optional[SolverConfig] = None) -> Trajectory:
    """Integrate the semilinear problem; ``T=None`` runs the whole control."""
    cfg = cfg or SolverConfig()
    if cfg.mode == "spectral_linear":
        return evolve_linear(spec, T, cfg)
    if cfg.mode == "picard":
        return evolve_picard(spec, T, cfg)
    op0 = assemble(spec.a, None, spec.grid)
    u = np.array(spec.u0, dtype=float)
    rec = _Recorder(u)
    for seg in schedule(spec.control, T, cfg):
        u = _imex_segment(spec, seg, u, rec, cfg, op0)
        rec.mark_breakpoint()
    return rec.build({"mode": "imex", "dt": cfg.dt, "spec_hash": _spec_hash(spec, cfg)})


# ---------------------------------------------------------------------------
# exact linear evolution

class BasisCache:
    """Eigenbases of A_0 + profile, one per distinct profile."""

    def __init__(self, spec: ProblemSpec):
        self.a, self.grid = spec.a, spec.grid
        self._store = {}

    def get(self, profile) -> EigenBasis:
        key = np.ascontiguousarray(profile).tobytes()
        if key not in self._store:
            self._store[key] = eigen(assemble(self.a, profile, self.grid))
        return self._store[key]


def evolve_linear(spec: ProblemSpec, T: Optional[float] = None, cfg: Optional[SolverConfig] = None,
                  bases: Optional[BasisCache] = None, stride: Optional[int] = None) -> Trajectory:
    """Solution of the linear problem (f ignored) by eigen-expansion per segment."""
    cfg = cfg or SolverConfig()
    bases = bases or BasisCache(spec)
    u = np.array(spec.u0, dtype=float)
    rec = _Recorder(u)
    for seg in schedule(spec.control, T, cfg, stride):
        basis = bases.get(spec.control.profiles[seg.index])
        shift = float(spec.control.shifts[seg.index])
        c0 = basis.coefficients(u)
        prev = 0
        for k in seg.recorded:
            tl = k * seg.dt
            u = basis.synthesize(np.exp(-(basis.lambdas - shift) * tl) * c0)
            rec.add(seg.start + tl, (k - prev) * seg.dt, u)
            prev = k
        rec.mark_breakpoint()
    return rec.build({"mode": "spectral_linear", "dt": cfg.dt, "spec_hash": _spec_hash(spec, cfg)})


# ---------------------------------------------------------------------------
# Picard iteration of the mild formulation

def _picard_map(spec, segs, bases, prev_states):
    """One application of the mild map using left-endpoint convolution quadrature."""
    x = spec.grid.centers
    out = [np.array(spec.u0, dtype=float)]
    pos = 0
    for seg in segs:
        basis = bases.get(spec.control.profiles[seg.index])
        shift = float(spec.control.shifts[seg.index])
        decay = np.exp(-(basis.lambdas - shift) * seg.dt)
        ts = seg.start + np.arange(seg.n_steps) * seg.dt
        forcing = np.stack([np.asarray(spec.f(t, x, prev_states[pos + k]), dtype=float) * np.ones_like(x)
                            for k, t in enumerate(ts)])
        g = spec.grid.h * forcing @ basis.omegas.T
        c = basis.coefficients(out[-1])
        coeffs = np.empty((seg.n_steps, len(c)))
        for k in range(seg.n_steps):
            c = decay * (c + seg.dt * g[k])
            coeffs[k] = c
        out.extend(coeffs @ basis.omegas)
        pos += seg.n_steps
    return np.array(out)


@dataclass
class PicardInfo:
    gaps: list
    iterations: int

    @property
    def ratios(self) -> list:
        return [b / a for a, b in zip(self.gaps, self.gaps[1:]) if a > 0]


def evolve_picard(spec: ProblemSpec, T: Optional[float] = None, cfg: Optional[SolverConfig] = None,
                  return_info: bool = False):
    """Fixed point of u -> e^{tA} u0 + int_0^t e^{(t-s)A} f(s, u(s)) ds.

    Every step is a stamp.  Iteration starts from the linear solution and
    stops once the sup over stamps of the L2 change drops below
    ``cfg.picard_tol``.
    """
    cfg = cfg or SolverConfig(mode="picard")
    segs = schedule(spec.control, T, cfg, stride=1)
    bases = BasisCache(spec)
    lin = evolve_linear(spec, T, cfg, bases, stride=1)
    states = lin.states
    h = spec.grid.h
    gaps = []
    for it in range(1, cfg.picard_maxit + 1):
        # a diverging iteration overflows; the isfinite check below reports it
        with np.errstate(over="ignore", invalid="ignore"):
            new = _picard_map(spec, segs, bases, states)
            gap = float(np.max(np.sqrt(h * np.sum((new - states) ** 2, axis=1))))
        gaps.append(gap)
        states = new
        if not np.isfinite(gap):
            break
        if gap <= cfg.picard_tol:
            traj = Trajectory(lin.times, lin.dts, states, lin.breakpoint_indices,
                              {"mode": "picard", "dt": cfg.dt, "iterations": it, "gaps": gaps,
                               "spec_hash": _spec_hash(spec, cfg)})
            return (traj, PicardInfo(gaps, it)) if return_info else traj
    raise PicardDivergence(f"horizon too long for Picard mode (gaps: {gaps[-3:]})")


# ---------------------------------------------------------------------------
# estimates

@dataclass
class NonnegativityReport:
    passed: bool
    min_value: float
    stamp: int
    cell: int
    vacuous: bool = False
    note: str = ""


def check_nonnegative(traj: Trajectory, tol: float = 1e-10) -> NonnegativityReport:
    states = traj.states
    flat = int(np.argmin(states))
    stamp, cell = divmod(flat, states.shape[1])
    mn = float(states[stamp, cell])
    if np.min(states[0]) < 0:
        return NonnegativityReport(True, mn, stamp, cell, vacuous=True, note="precondition unmet: u0 has a negative part")
    return NonnegativityReport(mn >= -tol, mn, stamp, cell)


def stability_gap(spec: ProblemSpec, u0, v0, T: Optional[float] = None, cfg: Optional[SolverConfig] = None,
                  tol_disc: float = 0.05):
    """Return ``(measured, bound, passed)`` for ||u - v||_B <= e^{(nu + |alpha+|) T} ||u0 - v0||."""
    cfg = cfg or SolverConfig()
    tu = evolve(spec.replace(u0=u0), T, cfg)
    tv = evolve(spec.replace(u0=v0), T, cfg)
    measured = trajectory_norms(tu - tv, spec.a).b_norm
    horizon = spec.control.horizon if T is None else T
    bound = math.exp((spec.f.nu + spec.control.alpha_plus_sup()) * horizon) * spec.grid.norm(np.asarray(u0) - np.asarray(v0))
    return measured, bound, bool(measured <= bound * (1 + tol_disc))


@dataclass(frozen=True)
class GapConstants:
    rho: float
    K: float
    C_hat: float
    theta: float
    nu: float
    alpha_plus: float = 0.0

    @classmethod
    def from_problem(cls, theta: float, nu: float, alpha_plus: float, C_hat: float = 1.0):
        return cls(rho=(3.0 - theta) / 4.0, K=(2.0 + theta) * alpha_plus + theta * nu,
                   C_hat=C_hat, theta=theta, nu=nu, alpha_plus=alpha_plus)

    def nu_T(self, T: float) -> float:
        return math.exp(self.nu * T)

    def K_for(self, alpha_plus: float) -> float:
        return (2.0 + self.theta) * alpha_plus + self.theta * self.nu

    def bound(self, T: float, u0_norm: float) -> float:
        return self.C_hat * T**self.rho * math.exp(self.K * T) * u0_norm**self.theta


@dataclass
class GapSample:
    T: float
    gap: float
    normalized: float


def _single_segment(spec: ProblemSpec, T: float) -> ProblemSpec:
    """Restrict to [0, T], keeping the control's first profile if T exceeds the horizon."""
    ctrl = spec.control
    if T <= ctrl.horizon:
        return spec
    return spec.replace(control=PiecewiseStaticControl(np.array([T]), ctrl.profiles[:1], ctrl.shifts[:1]))


def nonlinear_linear_gap(spec: ProblemSpec, T: float, gapc: GapConstants, cfg: Optional[SolverConfig] = None,
                         linear_mode: str = "imex") -> GapSample:
    """||u - v||_B for the nonlinear u and the linear v (f dropped).

    With ``linear_mode="imex"`` v comes from the same stepper as u, so the gap
    carries no time-discretisation error and vanishes for f = 0;
    ``"spectral"`` uses the exact eigen-expansion instead.
    """
    cfg = cfg or SolverConfig()
    s = _single_segment(spec, T)
    u = evolve(s, T, cfg)
    if linear_mode == "imex":
        v = evolve(s.replace(f=zero_nonlinearity(spec.f.theta)), T, cfg)
    elif linear_mode == "spectral":
        v = evolve_linear(s, T, cfg)
    else:
        raise ValueError(f"unknown linear_mode {linear_mode!r}")
    gap = trajectory_norms(u - v, spec.a).b_norm
    norm0 = spec.grid.norm(spec.u0)
    denom = T**gapc.rho * math.exp(gapc.K * T) * norm0**gapc.theta
    return GapSample(T=T, gap=gap, normalized=gap / denom if denom > 0 else 0.0)


def calibrate_gap_constants(spec: ProblemSpec, T_grid: Sequence[float] = (0.4, 0.2, 0.1, 0.05),
                            cfg: Optional[SolverConfig] = None, safety_factor: float = 2.0,
                            c_min: float = 1e-6, linear_mode: str = "imex"):
    """Empirical constant for the nonlinear-linear gap estimate.

    Returns ``(GapConstants, samples)``.
    """
    if len(T_grid) == 0:
        raise ValueError("T_grid must be nonempty")
    base = GapConstants.from_problem(spec.f.theta, spec.f.nu, spec.control.alpha_plus_sup())
    samples = [nonlinear_linear_gap(spec, T, base, cfg, linear_mode) for T in T_grid]
    c_hat = max(safety_factor * max(s.normalized for s in samples), c_min)
    return GapConstants(base.rho, base.K, c_hat, base.theta, base.nu, base.alpha_plus), samples
