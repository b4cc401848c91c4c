"""Command line entry point.

Exit codes: 0 success, 1 hard error (bad config, solver failure),
2 soft failure (tolerance unreachable, a verification check failed).
The output directory comes from ``[output] dir`` unless DEGCONTROL_OUT is set.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .export import eigen_csv, plan_text, trajectory_csv
from .solver import SolverError, evolve
from .sturm_liouville import EigenError, assemble, eigen
from .suites import SUITES, run_suite
from .synthesis import (PreconditionError, SynthesisError, SynthesisOptions, ToleranceNotReached, synthesize,
                        synthesize_signed)

OUT_ENV = "DEGCONTROL_OUT"
log = logging.getLogger("degcontrol")


def _outdir(cfg_dir: Path) -> Path:
    out = Path(os.environ.get(OUT_ENV, cfg_dir))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    path.write_text(text)
    print(f"wrote {path}")
    return path


def cmd_validate(cfg: ExperimentConfig) -> int:
    from .core_model import validate_assumptions

    report = validate_assumptions(cfg.spec)
    for line in report.lines():
        print(line)
    print(f"config {cfg.source_hash} task={cfg.task} n_cells={cfg.grid.n_cells}")
    return 0


def cmd_evolve(cfg: ExperimentConfig) -> int:
    traj = evolve(cfg.spec, cfg.params["T"], cfg.solver)
    _write(_outdir(cfg.output_dir), "trajectory.csv", trajectory_csv(traj))
    return 0


def cmd_eigen(cfg: ExperimentConfig) -> int:
    basis = eigen(assemble(cfg.spec.a, None, cfg.grid))
    _write(_outdir(cfg.output_dir), "eigen.csv", eigen_csv(basis, cfg.params["n_modes"]))
    return 0


def cmd_synthesize(cfg: ExperimentConfig) -> int:
    p = cfg.params
    opts = SynthesisOptions(s0=p["s0"], j_max=p["j_max"], eta=p["eta"], solver=cfg.solver)
    fn = synthesize_signed if p["signed"] else synthesize
    out = _outdir(cfg.output_dir)
    try:
        plan = fn(cfg.spec.u0, p["u_d"], p["eps"], cfg.spec.a, cfg.spec.f, opts)
    except ToleranceNotReached as exc:
        print(f"soft failure: {exc}", file=sys.stderr)
        for att in exc.attempts:
            print(f"  j={att.j} s={att.s:.4g} {att.status} err={att.error:.4g} {att.reason}", file=sys.stderr)
        return 2
    meta = {"config_hash": cfg.source_hash, "a": cfg.spec.a.name, "f": cfg.spec.f.name}
    _write(out, "plan.txt", plan_text(plan, meta))
    _write(out, "trajectory.csv", trajectory_csv(plan.trajectory))
    print(f"accepted s={plan.s!r} error={plan.achieved_error:.6g} eps={plan.eps:.6g}")
    return 0


def cmd_verify(suite: str, jobs: int, out_dir: Path) -> int:
    report = run_suite(suite, jobs)
    text = report.text()
    sys.stdout.write(text)
    _write(_outdir(out_dir), f"report_{suite}.txt", text)
    return 0 if report.passed else 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="degcontrol", description="Degenerate parabolic bilinear control toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("validate", "evolve", "eigen", "synthesize", "run"):
        sp = sub.add_parser(name)
        sp.add_argument("config", type=Path)
    vp = sub.add_parser("verify")
    vp.add_argument("suite", choices=sorted(SUITES))
    vp.add_argument("--jobs", type=int, default=1)
    vp.add_argument("--out", type=Path, default=Path("out"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify(args.suite, max(1, args.jobs), args.out)
        kind = None if args.command in ("validate", "run") else args.command
        cfg = load_config(args.config, kind)
        if args.command == "validate":
            return cmd_validate(cfg)
        if cfg.task == "verify":
            return cmd_verify(cfg.params["suite"], cfg.params["jobs"], cfg.output_dir)
        return {"evolve": cmd_evolve, "eigen": cmd_eigen, "synthesize": cmd_synthesize}[cfg.task](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (PreconditionError, SynthesisError, SolverError, EigenError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
