"""Problem data for the degenerate semilinear problem on (-1, 1).

    u_t - (a(x) u_x)_x = alpha(t, x) u + f(t, x, u),   a(x) u_x -> 0 at x = +-1.

States, targets and control profiles are plain numpy arrays of cell-centre
values; the uniform grid is fully determined by the array length, see
:meth:`Grid.for_field`.
"""
from __future__ import annotations

import bisect
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, interpolate

ArrayFunc = Callable[[np.ndarray], np.ndarray]


class StructureError(ValueError):
    """Problem components are inconsistent with each other."""


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid on (-1, 1)."""

    n_cells: int

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 8:
            raise ValueError(f"n_cells must be an integer >= 8, got {self.n_cells!r}")

    @property
    def h(self) -> float:
        return 2.0 / self.n_cells

    @property
    def centers(self) -> np.ndarray:
        return -1.0 + (np.arange(self.n_cells) + 0.5) * self.h

    @property
    def faces(self) -> np.ndarray:
        xf = -1.0 + np.arange(self.n_cells + 1) * self.h
        xf[0], xf[-1] = -1.0, 1.0
        return xf

    @classmethod
    def for_field(cls, u: np.ndarray) -> "Grid":
        return cls(int(np.shape(u)[-1]))

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(self.h * np.dot(u, v))

    def norm(self, u: np.ndarray) -> float:
        return math.sqrt(self.inner(u, u))


def _central_derivative(fn: ArrayFunc, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    return (fn(x + step) - fn(x - step)) / (2 * step)


@dataclass(frozen=True, eq=False)
class DiffusionCoefficient:
    """Diffusion coefficient a(x), possibly with analytic extras.

    ``faces_table`` holds tabulated face values; when present it takes
    precedence over ``a`` on grids of matching size.
    """

    a: ArrayFunc
    name: str = "custom"
    a_prime: Optional[ArrayFunc] = None
    xi_a_closed_form: Optional[ArrayFunc] = None
    faces_table: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        xs = np.linspace(-0.99, 0.99, 199)
        vals = np.asarray(self.a(xs), dtype=float)
        if not np.all(vals > 0):
            raise ValueError(f"diffusion coefficient {self.name!r} must be positive inside (-1, 1)")
        if self.xi_a_closed_form is not None:
            sample = np.array([-0.9, -0.5, -0.1, 0.1, 0.5, 0.9])
            num = _central_derivative(self.xi_a_closed_form, sample)
            ref = 1.0 / np.asarray(self.a(sample), dtype=float)
            if np.max(np.abs(num - ref) / np.abs(ref)) > 1e-6:
                raise ValueError("xi_a_closed_form is not an antiderivative of 1/a")

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.a(np.asarray(x, dtype=float)), dtype=float)

    def at_faces(self, grid: Grid) -> np.ndarray:
        if self.faces_table is not None and len(self.faces_table) == grid.n_cells + 1:
            return np.array(self.faces_table, dtype=float)
        return self(grid.faces)

    def derivative(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.a_prime is not None:
            return np.asarray(self.a_prime(x), dtype=float)
        return _central_derivative(self, x)

    def xi(self, x) -> np.ndarray:
        """The degeneracy integral xi_a(x) = int_0^x ds / a(s)."""
        if self.xi_a_closed_form is not None:
            return np.asarray(self.xi_a_closed_form(np.asarray(x, dtype=float)), dtype=float)
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.array([integrate.quad(lambda s: 1.0 / float(self(s)), 0.0, xi, limit=200)[0] for xi in xs])
        return out.reshape(np.shape(x))


def legendre_coefficient() -> DiffusionCoefficient:
    """a(x) = 1 - x^2, the Budyko-Sellers principal part."""
    return DiffusionCoefficient(
        a=lambda x: 1.0 - x**2,
        name="legendre",
        a_prime=lambda x: -2.0 * x,
        xi_a_closed_form=lambda x: 0.5 * np.log((1.0 + x) / (1.0 - x)),
    )


def power_coefficient(k: float) -> DiffusionCoefficient:
    """a(x) = (1 - x^2)^k."""
    if k <= 0:
        raise ValueError("power coefficient needs k > 0")
    if k == 1:
        return legendre_coefficient()
    return DiffusionCoefficient(
        a=lambda x: (1.0 - x**2) ** k,
        name=f"power:{k:g}",
        a_prime=lambda x: -2.0 * k * x * (1.0 - x**2) ** (k - 1),
    )


def tabulated_coefficient(face_values: Sequence[float], name: str = "table") -> DiffusionCoefficient:
    """Coefficient given by its values on the n_cells + 1 grid faces."""
    table = np.asarray(face_values, dtype=float)
    xf = np.linspace(-1.0, 1.0, len(table))
    return DiffusionCoefficient(a=lambda x: np.interp(x, xf, table), name=name, faces_table=table)


def coefficient_by_name(spec: str) -> DiffusionCoefficient:
    if spec == "legendre":
        return legendre_coefficient()
    if spec.startswith("power:"):
        return power_coefficient(float(spec.split(":", 1)[1]))
    if spec == "constant":
        return DiffusionCoefficient(a=lambda x: np.ones_like(x), name="constant", a_prime=np.zeros_like,
                                    xi_a_closed_form=lambda x: np.asarray(x, dtype=float))
    raise ValueError(f"unknown diffusion coefficient {spec!r}")


@dataclass(frozen=True, eq=False)
class Nonlinearity:
    """Reaction term f(t, x, u) with its growth constants.

    ``f`` must accept numpy arrays and broadcast over them.
    """

    f: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    gamma0: float
    theta: float
    nu: float
    f_u: Optional[Callable] = None
    name: str = "custom"

    def __post_init__(self):
        if self.gamma0 < 0 or self.nu < 0:
            raise ValueError("gamma0 and nu must be nonnegative")
        if not (1.0 <= self.theta < 3.0):
            raise ValueError(f"theta must lie in [1, 3), got {self.theta}")

    def __call__(self, t, x, u) -> np.ndarray:
        return self.f(t, x, u)


def zero_nonlinearity(theta: float = 2.0) -> Nonlinearity:
    return Nonlinearity(f=lambda t, x, u: np.zeros_like(u), gamma0=0.0, theta=theta, nu=0.0, name="none")


def example_nonlinearity(theta: float = 2.0, c: float | Callable = 0.0, c_max: float | None = None) -> Nonlinearity:
    """f = c(t,x) min{|u|^(theta-1), 1} u - |u|^(theta-1) u.

    ``c`` is a constant or a callable ``c(t, x)``; in the latter case pass
    ``c_max >= sup |c|``.
    """
    if callable(c):
        if c_max is None:
            raise ValueError("callable c needs an explicit c_max bound")
        cfun = c
        cbound = float(c_max)
        cplus = cbound
    else:
        cval = float(c)
        cfun = lambda t, x: cval  # noqa: E731
        cbound = abs(cval)
        cplus = max(cval, 0.0)

    def f(t, x, u):
        au = np.abs(u) ** (theta - 1.0)
        return cfun(t, x) * np.minimum(au, 1.0) * u - au * u

    def f_u(t, x, u):
        au = np.abs(u) ** (theta - 1.0)
        lin = np.where(np.abs(u) < 1.0, theta * au, 1.0)
        return cfun(t, x) * lin - theta * au

    # f_u <= theta (c - 1) for |u| < 1 and <= c - theta beyond
    nu = max(theta * (cplus - 1.0), cplus - theta, 0.0)
    return Nonlinearity(f=f, gamma0=cbound + 1.0, theta=theta, nu=nu, f_u=f_u,
                        name=f"example(theta={theta:g})")


@dataclass(frozen=True)
class PiecewiseStaticControl:
    """alpha(t, x) = profiles[i](x) + shifts[i] on segment i.

    Segment 0 is [0, t_1], segment i > 0 is (t_i, t_{i+1}].  The constant
    ``shifts`` are kept apart from the profiles so the solver can treat the
    spatially constant part exactly; ``durations`` are authoritative because a
    segment may be shorter than the float resolution of its start time.
    """

    durations: np.ndarray
    profiles: np.ndarray
    shifts: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.durations, dtype=float)
        p = np.atleast_2d(np.asarray(self.profiles, dtype=float))
        sh = np.asarray(self.shifts, dtype=float).reshape(-1)
        object.__setattr__(self, "durations", d)
        object.__setattr__(self, "profiles", p)
        object.__setattr__(self, "shifts", sh)
        if d.ndim != 1 or len(d) == 0:
            raise ValueError("need at least one segment")
        if not np.all(d > 0):
            raise ValueError("breakpoints must be strictly increasing")
        if p.shape[0] != len(d) or len(sh) != len(d):
            raise StructureError("one profile and one shift per segment required")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(sh))):
            raise ValueError("control profiles must be bounded")

    @classmethod
    def from_breakpoints(cls, breakpoints: Sequence[float], profiles, shifts=None):
        bp = np.asarray(breakpoints, dtype=float)
        if bp[0] != 0.0:
            raise ValueError("first breakpoint must be 0")
        profiles = np.atleast_2d(np.asarray(profiles, dtype=float))
        if shifts is None:
            shifts = np.zeros(len(bp) - 1)
        return cls(np.diff(bp), profiles, shifts)

    @classmethod
    def constant(cls, value: float, T: float, n_cells: int):
        return cls(np.array([T]), np.zeros((1, n_cells)), np.array([value]))

    @property
    def n_segments(self) -> int:
        return len(self.durations)

    @property
    def n_cells(self) -> int:
        return self.profiles.shape[1]

    @property
    def breakpoints(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.durations)])

    @property
    def horizon(self) -> float:
        return math.fsum(self.durations)

    def segment_alpha(self, i: int) -> np.ndarray:
        return self.profiles[i] + self.shifts[i]

    def alpha_plus_sup(self) -> float:
        return max(float(np.max(np.maximum(self.segment_alpha(i), 0.0))) for i in range(self.n_segments))

    def segment_index(self, t: float) -> int:
        bp = self.breakpoints
        if not (0.0 <= t <= bp[-1]):
            raise ValueError(f"time {t} outside control horizon [0, {bp[-1]}]")
        return max(bisect.bisect_left(bp, t), 1) - 1

    def concatenate(self, other: "PiecewiseStaticControl") -> "PiecewiseStaticControl":
        return PiecewiseStaticControl(
            np.concatenate([self.durations, other.durations]),
            np.vstack([self.profiles, other.profiles]),
            np.concatenate([self.shifts, other.shifts]),
        )


def eval_control(ctrl: PiecewiseStaticControl, t: float, i: int) -> float:
    """Value of the control at time ``t`` in cell ``i``."""
    k = ctrl.segment_index(t)
    return float(ctrl.profiles[k, i] + ctrl.shifts[k])


@dataclass(frozen=True)
class ProblemSpec:
    grid: Grid
    a: DiffusionCoefficient
    f: Nonlinearity
    u0: np.ndarray
    control: PiecewiseStaticControl

    def __post_init__(self):
        u0 = np.asarray(self.u0, dtype=float)
        object.__setattr__(self, "u0", u0)
        if u0.shape != (self.grid.n_cells,):
            raise StructureError(f"u0 has shape {u0.shape}, grid has {self.grid.n_cells} cells")
        if self.control.n_cells != self.grid.n_cells:
            raise StructureError("control profiles live on a different grid")

    def replace(self, **changes) -> "ProblemSpec":
        fields = dict(grid=self.grid, a=self.a, f=self.f, u0=self.u0, control=self.control)
        fields.update(changes)
        return ProblemSpec(**fields)


# ---------------------------------------------------------------------------
# assumption checks

@dataclass
class Check:
    id: str
    passed: bool
    detail: str = ""


@dataclass
class AssumptionReport:
    checks: list
    q_theta: float
    degeneracy: str
    xi_lq_integral: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def get(self, id_: str) -> Check:
        for c in self.checks:
            if c.id == id_:
                return c
        raise KeyError(id_)

    def lines(self) -> list:
        return [f"{c.id} {'pass' if c.passed else 'FAIL'} {c.detail}" for c in self.checks]


def q_theta(theta: float) -> float:
    return max((1.0 + theta) / (3.0 - theta), 2.0 * theta - 1.0)


def truncated_endpoint_integral(g: Callable[[float], float], tol: float = 1e-8, delta0: float = 0.125,
                                cap: float = 1e8, min_delta: float = 1e-15):
    """Integrate g over (-1, 1) by shrinking the excluded endpoint layers.

    Returns ``(value, converged)``.  Each halving of the layer width adds the
    two strips [-1 + d/2, -1 + d] and [1 - d, 1 - d/2]; the loop stops when a
    strip pair contributes less than ``tol * (1 + |value|)``, and reports
    divergence when the value exceeds ``cap`` or the layer width falls under
    ``min_delta``.
    """
    def quad(lo, hi):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            return integrate.quad(g, lo, hi, limit=200, epsabs=0.0, epsrel=1e-10)[0]

    delta = delta0
    total = quad(-1.0 + delta, 1.0 - delta)
    while delta > min_delta:
        half = delta / 2
        inc = quad(-1.0 + half, -1.0 + delta) + quad(1.0 - delta, 1.0 - half)
        total += inc
        delta = half
        if abs(total) > cap:
            return total, False
        if abs(inc) <= tol * (1.0 + abs(total)):
            return total, True
    return total, False


def xi_interpolant(a: DiffusionCoefficient, per_octave: int = 8, octaves: int = 40):
    """Cheap xi_a for coefficients without a closed form.

    xi_a is tabulated by piecewise quadrature on nodes 1 - 2^(-j/per_octave)
    and interpolated in the stretched variable -log2(1 - |x|), where it is
    smooth enough for a cubic spline.
    """
    sj = np.arange(octaves * per_octave + 1) / per_octave
    nodes = 1.0 - 2.0 ** (-sj)

    def side(sign):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            pieces = [integrate.quad(lambda y: 1.0 / float(a(sign * y)), lo, hi, limit=100)[0]
                      for lo, hi in zip(nodes[:-1], nodes[1:])]
        return interpolate.CubicSpline(sj, np.concatenate([[0.0], np.cumsum(pieces)]))

    right, left = side(1.0), side(-1.0)

    def xi(x):
        x = float(x)
        s_ = -math.log2(max(1.0 - abs(x), 2.0 ** (-octaves)))
        return float(right(s_)) if x >= 0 else -float(left(s_))

    return xi


def validate_assumptions(spec: ProblemSpec, u_max: float = 10.0, lattice=(32, 32, 64),
                         t_max: float | None = None, check_f_t: bool = False) -> AssumptionReport:
    """Sampled checks of the standing assumptions; failures are soft."""
    if spec.control.n_cells != spec.grid.n_cells or spec.u0.shape != (spec.grid.n_cells,):
        raise StructureError("components do not share one grid")
    grid, a, nl = spec.grid, spec.a, spec.f
    checks = []

    l2 = grid.norm(spec.u0)
    checks.append(Check("A.1", bool(np.isfinite(l2)), f"||u0||={l2:.6g}"))

    sup = max(float(np.max(np.abs(spec.control.segment_alpha(i)))) for i in range(spec.control.n_segments))
    checks.append(Check("A.2", bool(np.isfinite(sup)), f"sup|alpha|={sup:.6g}"))

    nt, nx, nu_ = lattice
    T = spec.control.horizon if t_max is None else t_max
    ts = np.linspace(0.0, T, nt)
    xs = np.linspace(-1.0, 1.0, nx + 2)[1:-1]
    us = np.linspace(-u_max, u_max, nu_)
    tt, xx, uu = np.meshgrid(ts, xs, us, indexing="ij")
    fv = np.asarray(nl(tt, xx, uu), dtype=float) * np.ones_like(uu)
    growth_excess = float(np.max(np.abs(fv) - nl.gamma0 * np.abs(uu) ** nl.theta))
    checks.append(Check("A.3.growth", growth_excess <= 1e-12 * (1 + nl.gamma0 * u_max**nl.theta),
                        f"max(|f|-gamma0|u|^theta)={growth_excess:.3g}"))
    du = uu[..., :, None] - uu[..., None, :]
    df = fv[..., :, None] - fv[..., None, :]
    lip_excess = float(np.max(df * du - nl.nu * du**2))
    checks.append(Check("A.3.one_sided", lip_excess <= 1e-10 * (1 + u_max ** (nl.theta + 1)),
                        f"max((f(u)-f(v))(u-v)-nu(u-v)^2)={lip_excess:.3g}"))
    f0 = np.asarray(nl(tt[..., 0], xx[..., 0], np.zeros_like(xx[..., 0])), dtype=float)
    checks.append(Check("A.3.zero", bool(np.all(f0 == 0.0)), f"max|f(t,x,0)|={float(np.max(np.abs(f0))):.3g}"))
    if check_f_t:
        dt = 1e-6 * max(T, 1.0)
        ft = (np.asarray(nl(tt + dt, xx, uu)) - np.asarray(nl(tt, xx, uu))) / dt
        excess = float(np.max(-ft * uu - nl.nu * uu**2))
        checks.append(Check("A.3.f_t", excess <= 1e-6 * (1 + u_max**2), f"max(-f_t u-nu u^2)={excess:.3g}"))

    ends = a(np.array([-1.0, 1.0]))
    inner = a(np.linspace(-1.0, 1.0, 1001)[1:-1])
    checks.append(Check("A.4.vanish", bool(np.max(np.abs(ends)) < 1e-12), f"a(-1)={ends[0]:.3g}, a(1)={ends[1]:.3g}"))
    checks.append(Check("A.4.positive", bool(np.all(inner > 0)), f"min a inside={float(np.min(inner)):.3g}"))

    q = q_theta(nl.theta)
    xi = a.xi if a.xi_a_closed_form is not None else xi_interpolant(a)
    xi_int, xi_ok = truncated_endpoint_integral(lambda x: abs(float(xi(x))) ** q)
    checks.append(Check("A.4.xi_Lq", bool(xi_ok), f"q={q:.6g} int|xi_a|^q={xi_int:.6g}"))

    inv_int, inv_ok = truncated_endpoint_integral(lambda x: 1.0 / float(a(x)))
    if np.max(np.abs(ends)) >= 1e-12:
        degeneracy = "none"
    else:
        degeneracy = "weak" if inv_ok else "strong"
    return AssumptionReport(checks=checks, q_theta=q, degeneracy=degeneracy, xi_lq_integral=xi_int)
