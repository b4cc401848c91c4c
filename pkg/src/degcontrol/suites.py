"""Verification batteries run by ``degcontrol verify <suite>``.

Every battery is deterministic: random inputs come from ``numpy`` generators
seeded with a fixed value per run index.  Sweep-style batteries accept a
``jobs`` count and farm independent runs out to worker processes; workers
rebuild their problem from plain arguments so nothing unpicklable crosses
the process boundary.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .core_model import (Grid, PiecewiseStaticControl, ProblemSpec, example_nonlinearity, legendre_coefficient,
                         zero_nonlinearity)
from .export import CheckResult, VerificationReport
from .solver import (SolverConfig, calibrate_gap_constants, check_nonnegative, evolve, evolve_picard,
                     stability_gap)
from .sturm_liouville import assemble, eigen, verify_ground_state
from .synthesis import PositiveOverlapError, SynthesisOptions, synthesize, synthesize_signed
from .weighted_spaces import embedding_bound, embedding_ratio

SEED = 20240917


def _map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def random_smooth_field(rng: np.random.Generator, grid: Grid, n_modes: int = 8) -> np.ndarray:
    """Cosine series with coefficients decaying like k^-2."""
    k = np.arange(n_modes)
    c = rng.standard_normal(n_modes) / (1.0 + k) ** 2
    return np.cos(np.pi * np.outer(k, (grid.centers + 1.0) / 2.0)).T @ c


def random_control(rng: np.random.Generator, grid: Grid, T: float, n_segments: int = 3,
                   bound: float = 2.0) -> PiecewiseStaticControl:
    w = rng.uniform(0.2, 1.0, n_segments)
    durations = T * w / w.sum()
    profiles = np.stack([random_smooth_field(rng, grid, 4) for _ in range(n_segments)])
    profiles *= bound / np.maximum(np.max(np.abs(profiles), axis=1, keepdims=True), 1e-300)
    return PiecewiseStaticControl(durations, profiles, np.zeros(n_segments))


def convergence_order(hs, errs) -> float:
    """Least-squares slope of log err against log h."""
    errs = np.abs(np.asarray(errs, dtype=float))
    if np.any(errs == 0):
        return math.inf
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


# ---------------------------------------------------------------------------

def spectrum_checks(ns=(128, 256, 512), n_target=512) -> list:
    a = legendre_coefficient()
    exact = np.array([(k - 1) * k for k in range(1, 6)], dtype=float)
    errs = {}
    out = []
    for n in ns:
        lam = eigen(assemble(a, None, Grid(n))).lambdas[:5]
        errs[n] = lam - exact
        rel = float(np.max(np.abs(errs[n][1:]) / exact[1:]))
        tag = "" if n == n_target else f".n{n}"
        out.append(CheckResult(f"spectrum.lambda1{tag}", abs(lam[0]) <= 1e-8, abs(float(lam[0])), 1e-8))
        out.append(CheckResult(f"spectrum.relerr_k2_5{tag}", rel <= 1e-3, rel, 1e-3))
    hs = [2.0 / n for n in ns]
    orders = [convergence_order(hs, [errs[n][k - 1] for n in ns]) for k in (2, 3, 4)]
    out.append(CheckResult("spectrum.order_fit", min(orders) >= 1.8, min(orders), 1.8,
                           note="the discrete spectrum is exact to roundoff for a = 1 - x^2"))
    return out


def ground_state_checks(n=512) -> list:
    a = legendre_coefficient()
    grid = Grid(n)
    x = grid.centers
    out = []
    for name, v in (("const", np.ones(n)), ("2-x", 2 - x), ("2+x2", 2 + x**2)):
        r = verify_ground_state(a, v, grid)
        out.append(CheckResult(f"ground_state.{name}.lambda1", abs(r.lambda1) <= 1e-6 * r.lambda2,
                               abs(r.lambda1), 1e-6 * r.lambda2))
        out.append(CheckResult(f"ground_state.{name}.alignment", r.alignment >= 1 - 1e-6, r.alignment, 1 - 1e-6))
        out.append(CheckResult(f"ground_state.{name}.omega1_sign", r.omega1_sign_constant,
                               float(r.omega1_sign_constant), 1.0))
        out.append(CheckResult(f"ground_state.{name}.omega2_sign_change", r.omega2_sign_changes,
                               float(r.omega2_sign_changes), 1.0))
    return out


def _embedding_run(i):
    grid = Grid(256)
    a = legendre_coefficient()
    rng = np.random.default_rng([SEED, 6, i])
    u = random_smooth_field(rng, grid, 12)
    return [embedding_ratio(u, a, p)[0] for p in (2, 3)]


def embedding_checks(n_fields=200, jobs=1) -> list:
    bound = embedding_bound(legendre_coefficient())
    ratios = np.array(_map(_embedding_run, list(range(n_fields)), jobs))
    out = []
    for j, p in enumerate((2, 3)):
        frac = float(np.mean(ratios[:, j] <= bound * 1.05))
        out.append(CheckResult(f"embeddings.p{p}.fraction", frac == 1.0, frac, 1.0, tol=0.05,
                               note=f"max ratio {np.max(ratios[:, j]):.4g}, bound {bound:.4g}"))
    return out


def _stability_run(i):
    grid = Grid(128)
    rng = np.random.default_rng([SEED, 4, i])
    T = 0.5
    spec = ProblemSpec(grid, legendre_coefficient(), example_nonlinearity(2.0, 1.5),
                       np.zeros(grid.n_cells), random_control(rng, grid, T, bound=1.0))
    u0 = 1.0 + random_smooth_field(rng, grid)
    v0 = u0 + 0.2 * random_smooth_field(rng, grid)
    measured, bound, _ = stability_gap(spec, u0, v0, None, SolverConfig(dt=1e-3))
    return measured, bound


def stability_checks(n_pairs=20, jobs=1) -> list:
    res = np.array(_map(_stability_run, list(range(n_pairs)), jobs))
    worst = float(np.max(res[:, 0] / res[:, 1]))
    return [CheckResult("stability.worst_ratio", worst <= 1.05, worst, 1.05, tol=0.05)]


def gap_problem(n=128) -> ProblemSpec:
    grid = Grid(n)
    return ProblemSpec(grid, legendre_coefficient(), example_nonlinearity(2.0, 0.0),
                       1.0 + np.cos(np.pi * grid.centers), PiecewiseStaticControl.constant(0.0, 0.4, n))


def gap_scaling_checks(T_grid=(0.4, 0.2, 0.1, 0.05)) -> list:
    spec = gap_problem()
    gapc, samples = calibrate_gap_constants(spec, T_grid, SolverConfig(dt=1e-3))
    gaps = np.array([s.gap for s in samples])
    Ts = np.array([s.T for s in samples])
    normd = np.array([s.normalized for s in samples])
    order = np.argsort(Ts)
    decreasing = bool(np.all(np.diff(gaps[order]) > 0))
    spread = float(np.max(normd) / np.min(normd))
    slope = convergence_order(Ts, gaps)
    return [
        CheckResult("gap_scaling.decreasing", decreasing, float(decreasing), 1.0),
        CheckResult("gap_scaling.normalized_spread", spread <= 10, spread, 10.0),
        CheckResult("gap_scaling.loglog_slope", slope >= gapc.rho - 0.15, slope, gapc.rho - 0.15),
    ]


def _nonneg_run(i):
    grid = Grid(128)
    rng = np.random.default_rng([SEED, 3, i])
    u0 = random_smooth_field(rng, grid)
    u0 = u0 - np.min(u0)
    spec = ProblemSpec(grid, legendre_coefficient(), example_nonlinearity(2.0, 0.5), u0,
                       random_control(rng, grid, 1.0, bound=3.0))
    return check_nonnegative(evolve(spec, None, SolverConfig(dt=1e-3)), 1e-10).min_value


def mass_drift(n=128, T=1.0) -> float:
    grid = Grid(n)
    u0 = 1.0 + np.cos(np.pi * grid.centers) + 0.3 * grid.centers
    spec = ProblemSpec(grid, legendre_coefficient(), zero_nonlinearity(), u0,
                       PiecewiseStaticControl.constant(0.0, T, n))
    traj = evolve(spec, None, SolverConfig(dt=1e-3))
    mass = grid.h * np.sum(traj.states, axis=1)
    return float(np.max(np.abs(mass - mass[0])))


def nonnegativity_checks(n_runs=20, jobs=1) -> list:
    drift = mass_drift()
    mins = _map(_nonneg_run, list(range(n_runs)), jobs)
    worst = float(np.min(mins))
    return [
        CheckResult("nonnegativity.mass_drift", drift <= 1e-10, drift, 1e-10),
        CheckResult("nonnegativity.min_excursion", worst >= -1e-10, worst, -1e-10),
    ]


def picard_checks(T=0.05, n=128, dt=1e-3) -> list:
    grid = Grid(n)
    spec = ProblemSpec(grid, legendre_coefficient(), example_nonlinearity(2.0, 1.0),
                       1.0 + np.cos(np.pi * grid.centers), PiecewiseStaticControl.constant(0.0, T, n))
    cfg = SolverConfig(dt=dt, stride=1, picard_tol=1e-10)
    pic, info = evolve_picard(spec, None, cfg, return_info=True)
    imex = evolve(spec, None, cfg)
    disc = float(np.max(np.sqrt(grid.h * np.sum((pic.states - imex.states) ** 2, axis=1))))
    scale = float(np.max(imex.l2_norms()))
    tol = max(3 * dt * scale, 10 * cfg.picard_tol)
    ratios = info.ratios
    worst = float(max(ratios)) if ratios else 0.0
    return [
        CheckResult("picard.discrepancy", disc <= tol, disc, tol),
        CheckResult("picard.contraction", worst < 1.0 and info.iterations >= 2, worst, 1.0,
                    note=f"{info.iterations} iterations"),
    ]


def trend_violations(ratios, floor=1e-12) -> int:
    """Count j with r[j+2] > r[j] beyond an absolute roundoff floor."""
    r = [x for x in ratios if np.isfinite(x)]
    return sum(1 for j in range(len(r) - 2) if r[j + 2] > r[j] + floor)


def controllability_problem(n=256):
    grid = Grid(n)
    x = grid.centers
    u_d = 2.0 + x**2
    return dict(grid=grid, a=legendre_coefficient(), f=example_nonlinearity(2.0, 0.0),
                u0=1.0 + np.cos(np.pi * x), u_d=u_d, eps=0.05 * grid.norm(u_d))


def plan_checks(plan, prefix: str) -> list:
    ident = plan.identities()
    worst = max(ident["stage1_scale"], ident["stage3_scale"], ident["beta_rule"], ident["alpha2_split"])
    return [CheckResult(f"{prefix}.identities", worst <= 1e-12, worst, 1e-12),
            CheckResult(f"{prefix}.segments", plan.control.n_segments == 3, plan.control.n_segments, 3)]


def controllability_checks(n=256, j_max=12) -> list:
    p = controllability_problem(n)
    opts = SynthesisOptions(j_max=j_max)
    out = []
    plan = synthesize(p["u0"], p["u_d"], p["eps"], p["a"], p["f"], opts)
    ratios = [att.delta_s_ratio for att in plan.attempts]
    viol = trend_violations(ratios)
    out += [
        CheckResult("controllability.error", plan.achieved_error <= p["eps"], plan.achieved_error, p["eps"]),
        CheckResult("controllability.outer_iterations", plan.attempts[-1].j <= j_max, plan.attempts[-1].j, j_max),
        CheckResult("controllability.delta_trend_violations", viol <= 1, viol, 1),
        CheckResult("controllability.nonnegative", plan.nonnegativity.passed, plan.nonnegativity.min_value, -1e-10),
    ]
    out += plan_checks(plan, "controllability")
    x = p["grid"].centers
    signed = synthesize_signed(p["u_d"] + 0.5 * np.sin(np.pi * x), p["u_d"], p["eps"], p["a"], p["f"], opts)
    out.append(CheckResult("controllability.signed.error", signed.achieved_error <= p["eps"],
                           signed.achieved_error, p["eps"]))
    out += plan_checks(signed, "controllability.signed")
    # odd perturbation of an even target has zero overlap
    try:
        synthesize_signed(np.sin(np.pi * x), p["u_d"], p["eps"], p["a"], p["f"], opts)
        rejected = False
    except PositiveOverlapError:
        rejected = True
    out.append(CheckResult("controllability.signed.orthogonal_rejected", rejected, float(rejected), 1.0))
    return out


SUITES = {
    "spectrum": lambda jobs: spectrum_checks(),
    "ground_state": lambda jobs: ground_state_checks(),
    "embeddings": lambda jobs: embedding_checks(jobs=jobs),
    "stability": lambda jobs: stability_checks(jobs=jobs),
    "gap_scaling": lambda jobs: gap_scaling_checks(),
    "nonnegativity": lambda jobs: nonnegativity_checks(jobs=jobs),
    "controllability": lambda jobs: controllability_checks(),
    "picard": lambda jobs: picard_checks(),
}


def run_suite(name: str, jobs: int = 1) -> VerificationReport:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    return VerificationReport(name, SUITES[name](jobs), {"version": __version__, "seed": SEED})
