"""Three-stage piecewise static bilinear control steering u0 towards a target.

Stage 1 applies a negative constant control that shrinks the state to about
s * u0 before diffusion has moved it.  Stage 2 applies alpha_* + beta, whose
operator has the (lifted) target as ground state, so every other mode decays
relative to it while the amplitude drops to s^(1+eta).  Stage 3 applies a
large positive constant that scales the state back up over a very short
interval.  The scale s is searched geometrically and every candidate is
accepted only on a closed-loop measurement of the nonlinear system.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .core_model import DiffusionCoefficient, Grid, Nonlinearity, PiecewiseStaticControl, ProblemSpec
from .solver import (GapConstants, NonnegativityReport, SolverConfig, Trajectory, calibrate_gap_constants,
                     check_nonnegative, evolve)
from .sturm_liouville import EigenBasis, alpha_star, assemble, eigen

log = logging.getLogger(__name__)


class SynthesisError(RuntimeError):
    pass


class StageError(SynthesisError):
    """A stage cannot be planned at the current scale s."""


class PreconditionError(ValueError):
    pass


class PositiveOverlapError(PreconditionError):
    """<u0, u_d> > 0 is required by the signed variant."""


class ToleranceNotReached(SynthesisError):
    def __init__(self, message, best, attempts):
        super().__init__(message)
        self.best = best
        self.attempts = attempts


@dataclass
class TargetSpec:
    u_d_raw: np.ndarray
    u_d: np.ndarray
    kappa: float
    mollifier_width: float


def lift_target(u_d_raw: np.ndarray, eps: float, width_cells: float = 4.0) -> TargetSpec:
    """Smooth, strictly positive target within eps/2 of ``u_d_raw``."""
    raw = np.asarray(u_d_raw, dtype=float)
    grid = Grid.for_field(raw)
    width = width_cells
    kappa = max(eps / 4.0, 1e-3 * grid.norm(raw)) / math.sqrt(2.0)
    for _ in range(80):
        smooth = gaussian_filter1d(raw, sigma=width, mode="reflect") if width > 0 else raw.copy()
        u_d = smooth + kappa
        if grid.norm(u_d - raw) <= eps / 2 and np.min(u_d) > 0:
            return TargetSpec(raw, u_d, kappa, width * grid.h)
        kappa /= 2
        width = width / 2 if width > 0.25 else 0.0
    raise SynthesisError("could not lift the target within eps/2")


def _largest_satisfying(pred: Callable[[float], bool], lo: float, hi: float, iters: int = 120) -> Optional[float]:
    """Largest t in [lo, hi] with pred(t), for pred true on an initial interval.

    Bisection runs on log t so that roots many decades below ``hi`` resolve.
    """
    if pred(hi):
        return hi
    if not pred(lo):
        return None
    llo, lhi = math.log(lo), math.log(hi)
    for _ in range(iters):
        mid = 0.5 * (llo + lhi)
        if pred(math.exp(mid)):
            llo = mid
        else:
            lhi = mid
    return math.exp(llo)


def _drift(basis: EigenBasis, state: np.ndarray):
    """t -> ||z(t) - state|| for the free A_0 evolution z of ``state``."""
    c2 = basis.coefficients(state) ** 2
    mu = basis.lambdas

    def drift(t):
        return math.sqrt(float(np.sum(np.expm1(-mu * t) ** 2 * c2)))

    return drift


def plan_step1(u0: np.ndarray, s: float, basis: EigenBasis, gapc: GapConstants, t_floor: float = 1e-300):
    """Return ``(t1, alpha1)`` with exp(alpha1 t1) = s."""
    if not 0 < s < 1:
        raise ValueError(f"scale s must lie in (0, 1), got {s}")
    grid = basis.grid
    norm0 = grid.norm(u0)
    if norm0 == 0:
        raise ValueError("u0 must be nonzero")
    drift = _drift(basis, u0)
    t_star = _largest_satisfying(lambda t: drift(t) <= s / 2, t_floor, 1.0)
    rhs = s**2 / (2.0 * gapc.C_hat * norm0**gapc.theta)
    t_bar = _largest_satisfying(lambda t: t**gapc.rho * math.exp(gapc.K * t) <= rhs, t_floor, 1.0)
    if t_star is None or t_bar is None:
        raise StageError("stage-1 horizon below the time floor")
    t1 = min(t_star, t_bar, 1.0)
    return t1, math.log(s) / t1


def stage2_shift(alpha_star_sup: float, eta: float, K: float, theta: float) -> float:
    return min(-alpha_star_sup, -eta * K / (theta - 1.0 - eta)) - 1.0


@dataclass
class Stage2:
    alpha2: np.ndarray
    alpha_star: np.ndarray
    beta: float
    increment: float


def plan_step2(state1: np.ndarray, target: TargetSpec, s: float, eta: float, gapc: GapConstants,
               a: DiffusionCoefficient) -> Stage2:
    if not 0 < eta < gapc.theta - 1:
        raise ValueError(f"eta must lie in (0, {gapc.theta - 1:g})")
    grid = Grid.for_field(state1)
    u_d = target.u_d
    overlap = grid.inner(state1, u_d)
    if overlap <= 0:
        raise StageError("ground-state coefficient nonpositive; s too large or hypotheses violated")
    ast = alpha_star(a, u_d, grid)
    beta = stage2_shift(float(np.max(np.abs(ast))), eta, gapc.K, gapc.theta)
    arg = s**eta * grid.inner(u_d, u_d) / (overlap / s)
    if arg >= 1:
        raise StageError("s not small enough for stage-2 horizon")
    return Stage2(alpha2=ast + beta, alpha_star=ast, beta=beta, increment=math.log(arg) / beta)


def plan_step3(state2: np.ndarray, s: float, eta: float, target: TargetSpec, gapc: GapConstants, eps: float,
               basis: EigenBasis, tau_min: float = 1e-300):
    """Return ``(tau, alpha3)`` with exp(alpha3 tau) = s^-(1+eta)."""
    grid = basis.grid
    lift = s ** (1 + eta)
    scale = gapc.C_hat * s ** (-2 * (1 + eta)) * (grid.norm(target.u_d) + 1) ** gapc.theta

    def gap_ok(tau):
        return scale * tau**gapc.rho * math.exp(gapc.nu * gapc.theta * tau) <= eps / 2

    drift = _drift(basis, state2)
    tau_gap = _largest_satisfying(gap_ok, tau_min, 1.0)
    tau_drift = _largest_satisfying(lambda t: drift(t) <= eps / 4 * lift, tau_min, 1.0)
    if tau_gap is None or tau_drift is None:
        raise StageError("epsilon unreachable at this s; decrease s")
    tau = min(tau_gap, tau_drift)
    return tau, -(1 + eta) * math.log(s) / tau


@dataclass
class SynthesisOptions:
    s0: float = 0.5
    j_max: int = 20
    eta: Optional[float] = None
    safety_factor: float = 2.0
    c_min: float = 1e-6
    T_grid: Sequence[float] = (0.4, 0.2, 0.1, 0.05)
    mollifier_cells: float = 4.0
    tau_min: float = 1e-300
    solver: SolverConfig = field(default_factory=SolverConfig)


@dataclass
class Attempt:
    j: int
    s: float
    status: str
    reason: str = ""
    error: float = math.inf
    delta_s_ratio: float = math.nan
    delta_eta_ratio: float = math.nan
    plan: Optional["SynthesisPlan"] = None


@dataclass
class SynthesisPlan:
    s: float
    eta: float
    t1: float
    t2: float
    T: float
    tau: float
    alpha1: float
    alpha2: np.ndarray
    alpha_star: np.ndarray
    beta: float
    alpha3: float
    eps: float
    durations: np.ndarray
    gapc: GapConstants
    achieved_error: float = math.inf
    delta_s_ratio: float = math.nan
    delta_eta_ratio: float = math.nan
    target: Optional[TargetSpec] = None
    trajectory: Optional[Trajectory] = None
    nonnegativity: Optional[NonnegativityReport] = None
    attempts: list = field(default_factory=list)
    calibration: list = field(default_factory=list)

    @property
    def control(self) -> PiecewiseStaticControl:
        n = len(self.alpha2)
        profiles = np.vstack([np.zeros(n), self.alpha_star, np.zeros(n)])
        return PiecewiseStaticControl(np.asarray(self.durations), profiles,
                                      np.array([self.alpha1, self.beta, self.alpha3]))

    def identities(self) -> dict:
        """Residuals of the defining control identities (all should be ~1e-16)."""
        a_sup = float(np.max(np.abs(self.alpha_star)))
        beta_ref = stage2_shift(a_sup, self.eta, self.gapc.K, self.gapc.theta)
        return {
            "stage1_scale": abs(math.exp(self.alpha1 * self.t1) - self.s) / self.s,
            "stage3_scale": abs(math.exp(self.alpha3 * self.tau) * self.s ** (1 + self.eta) - 1.0),
            "beta_rule": abs(self.beta - beta_ref) / abs(beta_ref),
            "alpha2_split": float(np.max(np.abs(self.alpha2 - (self.alpha_star + self.beta)))),
        }


def _check_problem(u0, u_d_raw, eps, f: Nonlinearity):
    if not eps > 0:
        raise ValueError("eps must be positive")
    if np.min(u_d_raw) < 0:
        raise PreconditionError("target must be nonnegative")
    if not 1.0 < f.theta < 3.0:
        raise PreconditionError("synthesis needs theta in (1, 3) so that (0, theta - 1) is nonempty")
    if not np.any(u0 != 0):
        raise PreconditionError("u0 must be nonzero")


def synthesize(u0, u_d_raw, eps: float, a: DiffusionCoefficient, f: Nonlinearity,
               opts: Optional[SynthesisOptions] = None) -> SynthesisPlan:
    """Plan and verify a control for nonnegative u0 and target."""
    u0 = np.asarray(u0, dtype=float)
    u_d_raw = np.asarray(u_d_raw, dtype=float)
    _check_problem(u0, u_d_raw, eps, f)
    if np.min(u0) < 0:
        raise PreconditionError("u0 must be nonnegative; use synthesize_signed")
    return _synthesize(u0, u_d_raw, eps, a, f, opts or SynthesisOptions(), signed=False)


def synthesize_signed(u0, u_d_raw, eps: float, a: DiffusionCoefficient, f: Nonlinearity,
                      opts: Optional[SynthesisOptions] = None) -> SynthesisPlan:
    """Same pipeline for sign-changing u0 with positive overlap with the target."""
    u0 = np.asarray(u0, dtype=float)
    u_d_raw = np.asarray(u_d_raw, dtype=float)
    _check_problem(u0, u_d_raw, eps, f)
    grid = Grid.for_field(u0)
    # overlaps at roundoff level count as zero
    if grid.inner(u0, u_d_raw) <= 1e-12 * grid.norm(u0) * grid.norm(u_d_raw):
        raise PositiveOverlapError("precondition <u0, u_d> > 0 violated")
    return _synthesize(u0, u_d_raw, eps, a, f, opts or SynthesisOptions(), signed=True)


def _synthesize(u0, u_d_raw, eps, a, f, opts: SynthesisOptions, signed: bool) -> SynthesisPlan:
    grid = Grid.for_field(u0)
    cfg = opts.solver
    target = lift_target(u_d_raw, eps, opts.mollifier_cells)
    eta = opts.eta if opts.eta is not None else (f.theta - 1.0) / 2.0
    basis0 = eigen(assemble(a, None, grid))

    calib_ctrl = PiecewiseStaticControl.constant(0.0, max(opts.T_grid), grid.n_cells)
    calib_spec = ProblemSpec(grid, a, f, u0, calib_ctrl)
    gapc, samples = calibrate_gap_constants(calib_spec, opts.T_grid, cfg, opts.safety_factor, opts.c_min)
    log.info("calibrated C_hat=%.6g K=%.6g rho=%.3g", gapc.C_hat, gapc.K, gapc.rho)

    attempts = []
    for j in range(opts.j_max + 1):
        s = opts.s0 * 2.0 ** (-j)
        att = _attempt(j, s, u0, target, eps, eta, a, f, gapc, basis0, cfg, opts)
        att_plan = att.plan
        if att_plan is not None:
            att_plan.calibration = samples
        attempts.append(att)
        log.info("j=%d s=%.4g %s err=%.4g %s", j, s, att.status, att.error, att.reason)
        if att.status == "accepted":
            plan = att.plan
            plan.attempts = attempts
            if not signed:
                plan.nonnegativity = check_nonnegative(plan.trajectory, 1e-10)
            return plan
    finished = [a_ for a_ in attempts if a_.plan is not None]
    best = min(finished, key=lambda a_: a_.error) if finished else None
    best_err = best.error if best else math.inf
    raise ToleranceNotReached(f"tolerance not achieved; best err {best_err:.4g} > eps {eps:.4g}", best, attempts)


def _attempt(j, s, u0, target, eps, eta, a, f, gapc, basis0, cfg, opts) -> Attempt:
    grid = basis0.grid
    n = grid.n_cells
    att = Attempt(j=j, s=s, status="rejected")
    try:
        t1, alpha1 = plan_step1(u0, s, basis0, gapc)
        seg1 = PiecewiseStaticControl(np.array([t1]), np.zeros((1, n)), np.array([alpha1]))
        state1 = evolve(ProblemSpec(grid, a, f, u0, seg1), None, cfg).final
        att.delta_s_ratio = grid.norm(state1 - s * u0) / s

        st2 = plan_step2(state1, target, s, eta, gapc, a)
        seg2 = PiecewiseStaticControl(np.array([st2.increment]), st2.alpha_star[None, :], np.array([st2.beta]))
        state2 = evolve(ProblemSpec(grid, a, f, state1, seg2), None, cfg).final
        lift = s ** (1 + eta)
        att.delta_eta_ratio = grid.norm(state2 - lift * target.u_d) / lift

        tau, alpha3 = plan_step3(state2, s, eta, target, gapc, eps, basis0, opts.tau_min)
    except StageError as exc:
        att.reason = str(exc)
        return att

    durations = np.array([t1, st2.increment, tau])
    plan = SynthesisPlan(
        s=s, eta=eta, t1=t1, t2=t1 + st2.increment, T=t1 + st2.increment + tau, tau=tau,
        alpha1=alpha1, alpha2=st2.alpha2, alpha_star=st2.alpha_star, beta=st2.beta, alpha3=alpha3,
        eps=eps, durations=durations, gapc=gapc, target=target,
        delta_s_ratio=att.delta_s_ratio, delta_eta_ratio=att.delta_eta_ratio,
    )
    traj = evolve(ProblemSpec(grid, a, f, u0, plan.control), None, cfg)
    plan.trajectory = traj
    plan.achieved_error = grid.norm(traj.final - target.u_d_raw)
    att.error = plan.achieved_error
    att.plan = plan
    if plan.achieved_error <= eps:
        att.status = "accepted"
    else:
        att.reason = "closed-loop error above eps"
    return att
