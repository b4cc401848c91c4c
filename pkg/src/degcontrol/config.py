"""Experiment configuration: one TOML file, validated field by field.

Example::

    [problem]
    a = "legendre"            # or "power:1.5", "constant", or a_table = "faces.csv"
    u0 = "1 + cos(pi*x)"      # expression in x, or u0_table = "u0.csv"
    alpha = 0.0               # constant control for evolve

    [problem.f]
    name = "example"          # "example" or "none"
    theta = 2.0
    c = 0.0

    [solver]
    n_cells = 256
    mode = "imex"
    dt = 1e-3

    [task]
    kind = "synthesize"       # evolve | eigen | synthesize | verify
    u_d = "2 + x**2"
    eps_rel = 0.05

    [output]
    dir = "out"
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import tomli

from .core_model import (DiffusionCoefficient, Grid, Nonlinearity, PiecewiseStaticControl, ProblemSpec,
                         coefficient_by_name, example_nonlinearity, tabulated_coefficient, zero_nonlinearity)
from .solver import SolverConfig

TASKS = ("evolve", "eigen", "synthesize", "verify")
_EXPR_NAMES = {name: getattr(np, name) for name in
               ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh", "sinh", "cosh", "pi", "e",
                "maximum", "minimum", "where", "sign", "ones_like", "zeros_like")}


class ConfigError(ValueError):
    """Validation failure; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def field_expression(expr: str, x: np.ndarray, path: str) -> np.ndarray:
    """Evaluate an expression in ``x`` with numpy's elementary functions only."""
    try:
        with np.errstate(all="ignore"):
            val = eval(compile(expr, path, "eval"), {"__builtins__": {}}, dict(_EXPR_NAMES, x=x))
    except Exception as exc:
        raise ConfigError(path, f"cannot evaluate expression {expr!r}: {exc}") from exc
    val = np.broadcast_to(np.asarray(val, dtype=float), x.shape).copy()
    if not np.all(np.isfinite(val)):
        raise ConfigError(path, "expression produced non-finite values")
    return val


def _table(path: str, base: Path, field_path: str) -> np.ndarray:
    p = Path(path)
    p = p if p.is_absolute() else base / p
    try:
        return np.loadtxt(p, delimiter=",", comments="#", ndmin=1)
    except OSError as exc:
        raise ConfigError(field_path, f"cannot read table {p}: {exc}") from exc


class _Fields:
    def __init__(self, data: dict, prefix: str):
        self.data = data
        self.prefix = prefix

    def path(self, key):
        return f"{self.prefix}.{key}" if self.prefix else key

    def get(self, key, kind, default=..., lo=None, hi=None, choices=None):
        if key not in self.data:
            if default is ...:
                raise ConfigError(self.path(key), "missing required field")
            return default
        val = self.data[key]
        if kind is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if not isinstance(val, kind) or (kind is int and isinstance(val, bool)):
            raise ConfigError(self.path(key), f"expected {kind.__name__}, got {type(val).__name__}")
        if choices is not None and val not in choices:
            raise ConfigError(self.path(key), f"must be one of {', '.join(choices)}")
        if lo is not None and val < lo or hi is not None and val > hi:
            raise ConfigError(self.path(key), f"value {val} outside [{lo}, {hi}]")
        return val

    def table(self, key, default=None):
        val = self.data.get(key, default)
        if val is None:
            val = {}
        if not isinstance(val, dict):
            raise ConfigError(self.path(key), "expected a table")
        return _Fields(val, self.path(key))


@dataclass
class ExperimentConfig:
    spec: ProblemSpec
    solver: SolverConfig
    task: str
    params: dict
    output_dir: Path
    seed: int
    source_hash: str
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def grid(self) -> Grid:
        return self.spec.grid


def _coefficient(prob: _Fields, grid: Grid, base: Path) -> DiffusionCoefficient:
    if "a_table" in prob.data:
        faces = _table(prob.get("a_table", str), base, prob.path("a_table"))
        if len(faces) != grid.n_cells + 1:
            raise ConfigError(prob.path("a_table"), f"need {grid.n_cells + 1} face values, got {len(faces)}")
        try:
            return tabulated_coefficient(faces)
        except ValueError as exc:
            raise ConfigError(prob.path("a_table"), str(exc)) from exc
    name = prob.get("a", str, "legendre")
    try:
        return coefficient_by_name(name)
    except ValueError as exc:
        raise ConfigError(prob.path("a"), str(exc)) from exc


def _nonlinearity(ff: _Fields) -> Nonlinearity:
    name = ff.get("name", str, "none", choices=("none", "example"))
    theta = ff.get("theta", float, 2.0, lo=1.0, hi=3.0)
    if theta >= 3.0:
        raise ConfigError(ff.path("theta"), "theta must be < 3")
    if name == "none":
        return zero_nonlinearity(theta)
    return example_nonlinearity(theta, ff.get("c", float, 0.0))


def _field(prob: _Fields, key: str, grid: Grid, base: Path, default=None) -> Optional[np.ndarray]:
    tkey = key + "_table"
    if tkey in prob.data:
        vals = _table(prob.get(tkey, str), base, prob.path(tkey))
        if len(vals) != grid.n_cells:
            raise ConfigError(prob.path(tkey), f"need {grid.n_cells} cell values, got {len(vals)}")
        return vals
    if key not in prob.data:
        if default is None:
            raise ConfigError(prob.path(key), "missing required field")
        return field_expression(default, grid.centers, prob.path(key))
    return field_expression(prob.get(key, str), grid.centers, prob.path(key))


def parse_config(text: str, base: Path = Path("."), source: str = "<config>",
                 kind: Optional[str] = None) -> ExperimentConfig:
    """Parse and validate; ``kind`` overrides ``task.kind`` when given."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(source, f"parse error: {exc}") from exc
    root = _Fields(raw, "")
    solver = root.table("solver")
    n_cells = solver.get("n_cells", int, lo=8, hi=1 << 16)
    grid = Grid(n_cells)
    cfg = SolverConfig(
        dt=solver.get("dt", float, 1e-3, lo=1e-12, hi=1.0),
        mode=solver.get("mode", str, "imex", choices=("imex", "picard", "spectral_linear")),
        picard_tol=solver.get("picard_tol", float, 1e-10, lo=1e-16, hi=1e-2),
        picard_maxit=solver.get("picard_maxit", int, 60, lo=1, hi=10000),
        stride=solver.get("stride", int, 32, lo=1),
    )

    prob = root.table("problem")
    a = _coefficient(prob, grid, base)
    f = _nonlinearity(prob.table("f"))
    task = root.table("task")
    kind = kind or task.get("kind", str, choices=TASKS)
    # eigen and verify never touch the initial state
    u0 = _field(prob, "u0", grid, base, default="1 + 0*x" if kind in ("eigen", "verify") else None)
    params = {}
    if kind == "evolve":
        params["T"] = task.get("T", float, 1.0, lo=1e-12, hi=1e6)
    elif kind == "eigen":
        params["n_modes"] = task.get("n_modes", int, 10, lo=1, hi=n_cells)
    elif kind == "synthesize":
        params["u_d"] = _field(task, "u_d", grid, base)
        if "eps" in task.data:
            params["eps"] = task.get("eps", float, lo=0.0)
        else:
            params["eps"] = task.get("eps_rel", float, 0.05, lo=0.0, hi=1.0) * grid.norm(params["u_d"])
        if not params["eps"] > 0:
            raise ConfigError(task.path("eps"), "eps must be positive")
        params["eta"] = task.get("eta", float, None, lo=0.0)
        params["s0"] = task.get("s0", float, 0.5, lo=0.0, hi=1.0)
        params["j_max"] = task.get("j_max", int, 20, lo=0, hi=200)
        params["signed"] = task.get("signed", bool, False)
    else:
        params["suite"] = task.get("suite", str)
        params["jobs"] = task.get("jobs", int, 1, lo=1)

    alpha = prob.get("alpha", float, 0.0)
    horizon = params.get("T", 1.0)
    spec = ProblemSpec(grid, a, f, u0, PiecewiseStaticControl.constant(alpha, horizon, n_cells))
    out = root.table("output")
    run = root.table("run")
    return ExperimentConfig(
        spec=spec, solver=cfg, task=kind, params=params,
        output_dir=Path(out.get("dir", str, "out")),
        seed=run.get("seed", int, 0, lo=0),
        source_hash=hashlib.sha256(text.encode()).hexdigest()[:16],
        raw=raw,
    )


def load_config(path, kind: Optional[str] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc}") from exc
    return parse_config(text, base=path.parent, source=str(path), kind=kind)
