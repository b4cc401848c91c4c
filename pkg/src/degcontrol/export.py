"""Plain-text artifacts: trajectory and eigen CSVs, plan files, reports.

Numbers are written with ``repr`` so that every float round-trips exactly.
The first line of each file is a ``#`` version stamp; everything after it
is deterministic for a given input.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import __version__
from .core_model import PiecewiseStaticControl
from .solver import Trajectory
from .sturm_liouville import EigenBasis

STAMP = f"# degcontrol {__version__}"


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _row(values: Iterable) -> str:
    return ",".join(fmt(v) for v in values)


def body(text: str) -> str:
    """Drop comment lines, leaving the part covered by the replay guarantee."""
    return "\n".join(ln for ln in text.splitlines() if not ln.startswith("#"))


def trajectory_csv(traj: Trajectory) -> str:
    n = traj.states.shape[1]
    out = io.StringIO()
    out.write(STAMP + "\n")
    out.write(",".join(["t"] + [f"x{i}" for i in range(n)]) + "\n")
    for t, u in zip(traj.times, traj.states):
        out.write(fmt(t) + "," + _row(u) + "\n")
    return out.getvalue()


def eigen_csv(basis: EigenBasis, n_modes: int) -> str:
    n = basis.omegas.shape[1]
    k = min(n_modes, len(basis.lambdas))
    out = io.StringIO()
    out.write(STAMP + "\n")
    out.write(",".join(["k", "lambda"] + [f"v{i}" for i in range(n)]) + "\n")
    for j in range(k):
        out.write(f"{j + 1}," + fmt(basis.lambdas[j]) + "," + _row(basis.omegas[j]) + "\n")
    return out.getvalue()


def read_csv(path_or_text) -> tuple[list, np.ndarray]:
    text = Path(path_or_text).read_text() if isinstance(path_or_text, Path) else str(path_or_text)
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return header, data


PLAN_SCALARS = ("s", "eta", "beta", "t1", "t2", "tau", "T", "alpha1", "alpha3", "eps", "achieved_error",
                "C_hat", "K", "rho", "n_cells")


def plan_text(plan, provenance: Optional[dict] = None) -> str:
    """Key = value scalars, three durations, then the stage-2 profile as CSV."""
    out = io.StringIO()
    out.write(STAMP + " plan\n")
    values = dict(s=plan.s, eta=plan.eta, beta=plan.beta, t1=plan.t1, t2=plan.t2, tau=plan.tau, T=plan.T,
                  alpha1=plan.alpha1, alpha3=plan.alpha3, eps=plan.eps, achieved_error=plan.achieved_error,
                  C_hat=plan.gapc.C_hat, K=plan.gapc.K, rho=plan.gapc.rho, n_cells=len(plan.alpha2))
    for key in PLAN_SCALARS:
        out.write(f"{key} = {fmt(values[key])}\n")
    # interval lengths are authoritative; t1, t2, T may be rounded sums
    out.write("durations = " + _row(plan.durations) + "\n")
    for key, val in sorted((provenance or {}).items()):
        out.write(f"meta.{key} = {val}\n")
    out.write("[alpha2]\n")
    out.write("i,alpha_star,alpha2\n")
    for i, (ast, a2) in enumerate(zip(plan.alpha_star, plan.alpha2)):
        out.write(f"{i},{fmt(ast)},{fmt(a2)}\n")
    return out.getvalue()


@dataclass
class PlanRecord:
    scalars: dict
    durations: np.ndarray
    alpha_star: np.ndarray
    alpha2: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def control(self) -> PiecewiseStaticControl:
        n = len(self.alpha2)
        profiles = np.vstack([np.zeros(n), self.alpha_star, np.zeros(n)])
        return PiecewiseStaticControl(self.durations, profiles,
                                      np.array([self.scalars["alpha1"], self.scalars["beta"],
                                                self.scalars["alpha3"]]))


def read_plan(path_or_text) -> PlanRecord:
    text = Path(path_or_text).read_text() if isinstance(path_or_text, Path) else str(path_or_text)
    scalars, meta = {}, {}
    durations = None
    lines = text.splitlines()
    for idx, ln in enumerate(lines):
        if ln.startswith("#") or not ln.strip():
            continue
        if ln.strip() == "[alpha2]":
            _, data = read_csv("\n".join(lines[idx + 1:]))
            break
        key, _, val = (p.strip() for p in ln.partition("="))
        if key == "durations":
            durations = np.array([float(v) for v in val.split(",")])
        elif key.startswith("meta."):
            meta[key[5:]] = val
        else:
            scalars[key] = float(val)
    else:
        raise ValueError("plan file has no [alpha2] section")
    if durations is None:
        raise ValueError("plan file has no durations line")
    return PlanRecord(scalars=scalars, durations=durations, alpha_star=data[:, 1], alpha2=data[:, 2], meta=meta)


@dataclass
class CheckResult:
    id: str
    passed: bool
    measured: float
    bound: float
    tol: float = 0.0
    note: str = ""

    @property
    def status(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def line(self) -> str:
        return f"{self.id} {self.status} {self.measured:.6g} {self.bound:.6g} {self.tol:.3g}"


@dataclass
class VerificationReport:
    suite: str
    checks: list
    provenance: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def text(self) -> str:
        out = [STAMP + f" report suite={self.suite}"]
        out += [f"# {k} = {v}" for k, v in sorted(self.provenance.items())]
        out += [c.line() for c in self.checks]
        out.append(f"overall {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(out) + "\n"
