"""Command-line experiment runner.

Subcommands: ``m1``, ``m2``, ``sweep``, ``schrod-check``, ``gl-demo``,
``filament-demo`` and ``checks``.  Parameters come from an optional INI file
(section ``[experiment]``) and command-line overrides.  Every run writes
deterministic CSV files and a ``manifest.json`` into the output directory.

Exit status: 0 on success, 1 when a check fails, 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import bpx as bpx_mod
from . import filament3d as fil
from .grid2d import Grid2D, write_field
from .harmonic import DirectFeedback, Solver, feedback_observables, make_boundary_phase, reconstruct_outer, solve_harmonic
from .metrics import SweepRow, build_mask, loglog_slope, masked_relative_error, write_sweep
from .nls_ref import DEFAULT_POSITIONS, NLSParams, evolve_nls
from .schrodingerize import EmulatorFeedback, emulate_dirichlet_solve
from .vortex import GL_FREE, NLS_M1, LawKind, MotionLaw, VortexConfig, integrate_trajectory, motion_law_identity, write_trajectory

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(",", " ").split())


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    eps: tuple = (0.2, 0.1, 0.05, 0.025)
    level: int = 6
    dt: float = 1e-4
    T: float = 0.05
    r_mask: float = 0.1
    R: float | None = None
    N_p: int = 2**12
    tol: float = 1e-10
    solver: str = "sparse"
    feedback: str = "direct"
    solver_eps: float = 1e-6
    shots: int | None = None
    seed: int = 0
    boundary: str = "default-deg2"
    amplitude: float = 0.3
    positions: tuple = tuple(v for p in DEFAULT_POSITIONS for v in p)
    integrator: str = "explicit"
    bpx_weights: str = "standard"
    out: str = "out"

    _RANGES = {
        "level": (2, 9), "dt": (1e-9, 1.0), "T": (0.0, 10.0), "r_mask": (0.0, 0.5),
        "N_p": (4, 2**20), "tol": (1e-16, 1e-2), "solver_eps": (1e-12, 0.5), "amplitude": (-10.0, 10.0),
    }
    _CHOICES = {
        "solver": {s.value for s in Solver}, "feedback": {"direct", "emulator"},
        "integrator": {"explicit", "midpoint"}, "bpx_weights": {"standard", "perturbed"},
    }

    def validate(self) -> "ExperimentConfig":
        for key, (lo, hi) in self._RANGES.items():
            v = getattr(self, key)
            if not lo <= v <= hi:
                raise ConfigError(f"{key}={v} outside [{lo}, {hi}]")
        for key, allowed in self._CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {sorted(allowed)}")
        if self.N_p & (self.N_p - 1):
            raise ConfigError("N_p must be a power of two")
        if not self.eps or any(not 0 < e < 1 for e in self.eps):
            raise ConfigError("eps values must lie in (0, 1)")
        if len(self.positions) % 2:
            raise ConfigError("positions must list x y pairs")
        if self.R is not None and self.R <= 0:
            raise ConfigError("R must be positive")
        if self.shots is not None and self.shots < 1:
            raise ConfigError("shots must be positive")
        return self

    @property
    def config(self) -> VortexConfig:
        return VortexConfig(np.array(self.positions, dtype=float).reshape(-1, 2))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        cfg = cls()
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown configuration key {key!r}")
            default = getattr(cls(), key)
            try:
                if key in ("eps", "positions"):
                    val = _floats(raw)
                elif key in ("R", "shots"):
                    val = None if raw in (None, "", "none", "auto") else (float(raw) if key == "R" else int(raw))
                elif isinstance(default, bool):
                    val = str(raw).lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    val = int(raw)
                elif isinstance(default, float):
                    val = float(raw)
                else:
                    val = str(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
            setattr(cfg, key, val)
        return cfg.validate()

    @classmethod
    def from_ini(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys such as T and N_p are case sensitive
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        extra = set(parser.sections()) - {"experiment"}
        if extra:
            raise ConfigError(f"unknown config sections {sorted(extra)}")
        values = dict(parser["experiment"]) if parser.has_section("experiment") else {}
        values.update(overrides or {})
        return cls.from_mapping(values)


# -- helpers ------------------------------------------------------------------------

def _outdir(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_manifest(out: Path, cfg: ExperimentConfig, command: str, start: float, extra: dict | None = None) -> None:
    data = {"command": command, "version": __version__, "config": cfg.to_dict(),
            "wall_time_s": round(time.perf_counter() - start, 3)}
    if extra:
        data["results"] = extra
    (out / "manifest.json").write_text(json.dumps(data, indent=2, sort_keys=True, default=str))


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _output_steps(cfg: ExperimentConfig) -> list[float]:
    return [0.0, cfg.T / 2, cfg.T]


def _feedback(cfg: ExperimentConfig, phi):
    if cfg.feedback == "direct":
        return DirectFeedback(phi, Solver(cfg.solver), cfg.tol)
    return EmulatorFeedback(phi, cfg.solver_eps, cfg.R, cfg.N_p, cfg.shots, cfg.seed)


def _harmonic_for(cfg: ExperimentConfig, phi, config: VortexConfig) -> np.ndarray:
    if cfg.feedback == "direct":
        return solve_harmonic(config, phi, Solver(cfg.solver), cfg.tol)
    from .harmonic import HarmonicField, unwrap_boundary_phase

    trace = unwrap_boundary_phase(config, phi)
    h, _, _ = emulate_dirichlet_solve(phi.grid.level, trace, cfg.solver_eps, cfg.R, max(cfg.N_p, 2**12))
    return HarmonicField(phi.grid, h, trace, config, float("nan"))


def _snapshot(trajectory, t):
    return min(trajectory, key=lambda c: abs(c.t - t))


# -- workflows ----------------------------------------------------------------------

def run_m1(cfg: ExperimentConfig) -> dict:
    """Decoupled mode: classical M1 trajectory, harmonic solves at output times only."""
    out = _outdir(cfg)
    grid = Grid2D(cfg.level)
    phi = make_boundary_phase(grid, cfg.boundary, cfg.amplitude)
    traj = integrate_trajectory(cfg.config, NLS_M1, cfg.dt, cfg.T, cfg.integrator)
    write_trajectory(out / "trajectory.csv", traj)
    obs_rows = []
    for t in _output_steps(cfg):
        snap = _snapshot(traj, t)
        fld = _harmonic_for(cfg, phi, snap)
        u = reconstruct_outer(snap, fld)
        write_field(out / f"field_t{snap.t:.4f}.txt", grid, u.values, "u_outer")
        for j, c in enumerate(feedback_observables(snap, grid)):
            obs_rows.append([snap.t, j // 2 + 1, c.kind.value, c(fld.values)])
    _write_rows(out / "observables.csv", ["t", "vortex", "kind", "value"], obs_rows)
    return {"final_positions": traj[-1].positions.tolist()}


def run_m2(cfg: ExperimentConfig) -> dict:
    """Coupled mode: every step queries the boundary feedback at the vortex positions."""
    out = _outdir(cfg)
    grid = Grid2D(cfg.level)
    phi = make_boundary_phase(grid, cfg.boundary, cfg.amplitude)
    fb = _feedback(cfg, phi)
    rows = []

    def logged(config):
        g = fb(config)
        rows.append([config.t] + list(np.ravel(g)))
        return g

    traj = integrate_trajectory(cfg.config, MotionLaw(LawKind.NLS_M2, logged), cfg.dt, cfg.T, "explicit")
    write_trajectory(out / "trajectory.csv", traj)
    M = cfg.config.M
    _write_rows(out / "feedback.csv", ["t"] + [f"dh{j + 1}{c}" for j in range(M) for c in "xy"], rows)
    return {"final_positions": traj[-1].positions.tolist(), "feedback_calls": len(rows)}


def sweep_level(eps: float) -> int:
    """Smallest dyadic level with ``h <= eps / 4``."""
    return max(3, math.ceil(math.log2(4.0 / eps) - 1e-12))


def sweep_case(cfg: ExperimentConfig, eps: float) -> SweepRow:
    level = sweep_level(eps)
    params = NLSParams.with_default_dt(eps, level, T=cfg.T, boundary=cfg.boundary, amplitude=cfg.amplitude,
                                       positions=tuple(map(tuple, cfg.config.positions)))
    run = evolve_nls(params, snapshot_times=[cfg.T])
    phi = make_boundary_phase(params.grid, cfg.boundary, cfg.amplitude)
    a1 = integrate_trajectory(cfg.config, NLS_M1, cfg.dt, cfg.T)[-1]
    a2 = integrate_trajectory(cfg.config, MotionLaw(LawKind.NLS_M2, DirectFeedback(phi)), cfg.dt, cfg.T)[-1]
    mask = build_mask(a2, cfg.r_mask, params.grid)
    u = run.final
    e1 = masked_relative_error(u, reconstruct_outer(a1, solve_harmonic(a1, phi)), mask)
    e2 = masked_relative_error(u, reconstruct_outer(a2, solve_harmonic(a2, phi)), mask)
    log.info("eps=%g level=%d E_M1=%.4g E_M2=%.4g", eps, level, e1, e2)
    steps = math.ceil(cfg.T / params.dt - 1e-9)
    return SweepRow(eps, e1, e2, level, cfg.T / steps if steps else params.dt)


def run_sweep(cfg: ExperimentConfig) -> dict:
    out = _outdir(cfg)
    rows = [sweep_case(cfg, e) for e in cfg.eps]
    write_sweep(out / "sweep.csv", rows)
    slope = loglog_slope([r.eps for r in rows], [r.E_M2 for r in rows]) if len(rows) > 1 else float("nan")
    return {"slope_E_M2": slope, "rows": [dataclasses.asdict(r) for r in rows]}


def schrod_check(cfg: ExperimentConfig, level: int | None = None) -> dict:
    """Emulated solve of the harmonic problem against the direct solve."""
    level = cfg.level if level is None else level
    grid = Grid2D(level)
    phi = make_boundary_phase(grid, cfg.boundary, cfg.amplitude)
    direct = solve_harmonic(cfg.config, phi, Solver.SPARSE_DIRECT)
    h, _, rep = emulate_dirichlet_solve(level, direct.boundary, cfg.solver_eps, cfg.R, cfg.N_p)
    err = float(np.linalg.norm(h - direct.values) / np.linalg.norm(direct.values))
    return {"level": level, "eps": cfg.solver_eps, "relative_error": err, "T": rep.T, "R": rep.R,
            "N_p": rep.N_p, "p3": rep.p3, "norm_defect": rep.norm_defect,
            "passed": bool(err <= 2 * cfg.solver_eps and rep.norm_defect <= 1e-10)}


def run_schrod_check(cfg: ExperimentConfig) -> dict:
    out = _outdir(cfg)
    res = schrod_check(cfg)
    _write_rows(out / "schrod_check.csv", list(res), [list(res.values())])
    return res


def run_gl_demo(cfg: ExperimentConfig) -> dict:
    """Two free-plane vortices repelling under the gradient-flow law."""
    out = _outdir(cfg)
    start = VortexConfig(np.array([[-0.25, 0.0], [0.25, 0.0]]), bounded=False)
    traj = integrate_trajectory(start, GL_FREE, cfg.dt, cfg.T)
    write_trajectory(out / "trajectory.csv", traj)
    rows = []
    for c in traj:
        d2 = float(np.sum((c.positions[0] - c.positions[1]) ** 2))
        rows.append([c.t, d2, 0.25 + 8 * c.t])
    _write_rows(out / "separation.csv", ["t", "d2", "d2_exact"], rows)
    rel = abs(rows[-1][1] - rows[-1][2]) / rows[-1][2]
    return {"final_relative_error": rel}


def run_filament_demo(cfg: ExperimentConfig) -> dict:
    """Shrinking circular filament plus the London field of the initial ring."""
    out = _outdir(cfg)
    ring = fil.circle(0.3, 128)
    curves = fil.evolve_curve(ring, 1e-5, 0.04, stop_radius=0.1, stride=500)
    fil.write_curves(out / "curves.csv", curves)
    rows = [[c.t, c.mean_radius() ** 2, 0.09 - 2 * c.t] for c in curves]
    _write_rows(out / "radius.csv", ["t", "R2", "R2_exact"], rows)
    lf = fil.solve_london(fil.circle(0.2, 256), fil.Grid3D(4))
    probe = (0.6, 0.5, 0.5)
    return {"circle_law_max_rel": max(abs(a - b) / b for _, a, b in rows),
            "london_probe": list(probe), "london_H": lf.at(probe).tolist(),
            "green_H": fil.green_superposition(lf.curve, probe).tolist()}


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    detail: dict = field(default_factory=dict)


def run_checks(cfg: ExperimentConfig) -> list[CheckResult]:
    """Spectral, emulator, identity and filament checks with measured values."""
    out = _outdir(cfg)
    results = []
    rep = bpx_mod.spectral_report(2, range(3, 7), cfg.bpx_weights)
    conds = [r["cond"] for r in rep]
    spread = max(conds) / min(conds) - 1
    results.append(CheckResult("bpx_condition_uniformity", spread <= 0.5, spread,
                               {f"level{r['level']}": [r["lam_min"], r["lam_max"]] for r in rep}))
    _write_rows(out / "bpx_report.csv", list(rep[0]), [list(r.values()) for r in rep])

    sc = schrod_check(dataclasses.replace(cfg, solver_eps=1e-5, N_p=max(cfg.N_p, 2**14)), level=3)
    results.append(CheckResult("emulator_oracle", sc["relative_error"] <= 2e-5 and sc["norm_defect"] <= 1e-10,
                               sc["relative_error"], sc))

    grid = Grid2D(7)
    phi = make_boundary_phase(grid, cfg.boundary, cfg.amplitude)
    pair = VortexConfig(np.array([[0.35, 0.5], [0.65, 0.5]]))
    ic = motion_law_identity(pair, lambda c: solve_harmonic(c, phi), fd_step=1e-3)
    results.append(CheckResult("motion_law_identity", ic.relative <= 0.05, ic.relative))

    curves = fil.evolve_curve(fil.circle(0.3, 128), 1e-5, 0.04, stop_radius=0.1, stride=100)
    worst = max(abs(c.mean_radius() ** 2 - (0.09 - 2 * c.t)) / (0.09 - 2 * c.t) for c in curves)
    results.append(CheckResult("filament_circle_law", worst <= 0.01, worst))

    with (out / "checks.txt").open("w") as fh:
        for r in results:
            fh.write(f"{'PASS' if r.passed else 'FAIL'} {r.name} {r.value:.6g}\n")
            for k, v in r.detail.items():
                fh.write(f"    {k} = {v}\n")
    return results


COMMANDS = {
    "m1": run_m1,
    "m2": run_m2,
    "sweep": run_sweep,
    "schrod-check": run_schrod_check,
    "gl-demo": run_gl_demo,
    "filament-demo": run_filament_demo,
    "checks": run_checks,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vortexhybrid", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with an [experiment] section")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--level", type=int)
        p.add_argument("--eps", help="comma separated list of eps values")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return EXIT_CONFIG
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("out", "seed", "level", "eps"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    try:
        if args.config:
            cfg = ExperimentConfig.from_ini(args.config, overrides)
        else:
            cfg = ExperimentConfig.from_mapping(overrides)
        cfg.name = args.command
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    start = time.perf_counter()
    result = COMMANDS[args.command](cfg)
    out = Path(cfg.out)
    if args.command == "checks":
        failed = [r.name for r in result if not r.passed]
        for r in result:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.value:.6g}")
        _write_manifest(out, cfg, args.command, start, {r.name: {"passed": r.passed, "value": r.value}
                                                        for r in result})
        return EXIT_FAIL if failed else EXIT_OK
    _write_manifest(out, cfg, args.command, start, result)
    print(json.dumps(result, indent=2, default=str))
    if args.command == "schrod-check" and not result["passed"]:
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
