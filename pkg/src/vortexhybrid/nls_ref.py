"""Reference solver for the nonlinear Schrödinger equation with Dirichlet data.

The equation solved is

    i u_t = Delta u + eps^-2 (1 - |u|^2) u     in the unit square,
    u = g = exp(i phi_g)                       on the boundary,

whose energy ``int 1/2 |grad u|^2 + (1 - |u|^2)^2 / (4 eps^2)`` is conserved
and positive, so the flow is stable.  Time stepping is Strang splitting:
an exact pointwise phase rotation for the nonlinear part, a Crank-Nicolson
step with the five-point Laplacian for the linear part, and a second
nonlinear half step.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid2d import ComplexField2D, Grid2D, Scaling, apply_dirichlet_rhs, assemble_laplacian
from .harmonic import make_boundary_phase, solve_harmonic
from .vortex import VortexConfig, singular_phase

log = logging.getLogger(__name__)

DT_SAFETY = 0.5
DEFAULT_POSITIONS = ((0.35, 0.55), (0.70, 0.40))


class ConfigurationError(ValueError):
    pass


class DetectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class NLSParams:
    eps: float
    level: int
    dt: float
    T: float = 0.05
    boundary: str = "default-deg2"
    amplitude: float = 0.3
    positions: tuple = DEFAULT_POSITIONS

    def __post_init__(self):
        if self.eps <= 0 or self.T < 0 or self.dt <= 0:
            raise ConfigurationError("eps and dt must be positive and T non-negative")
        h = 2.0 ** (-self.level)
        budget = DT_SAFETY * min(h * h, self.eps**2)
        if self.dt > budget * (1 + 1e-12):
            raise ConfigurationError(f"dt={self.dt:g} exceeds the accuracy budget {budget:g}")
        object.__setattr__(self, "positions", tuple(tuple(map(float, p)) for p in self.positions))

    @property
    def grid(self) -> Grid2D:
        return Grid2D(self.level)

    @property
    def config(self) -> VortexConfig:
        return VortexConfig(np.array(self.positions, dtype=float).reshape(-1, 2))

    @classmethod
    def with_default_dt(cls, eps: float, level: int, **kw) -> "NLSParams":
        h = 2.0 ** (-level)
        return cls(eps=eps, level=level, dt=DT_SAFETY * min(h * h, eps**2), **kw)


def core_profile(rho):
    """Radial vortex profile ``f(rho) = tanh(rho / sqrt(2))``."""
    return np.tanh(np.asarray(rho) / math.sqrt(2.0))


def initial_data(params: NLSParams) -> ComplexField2D:
    """Vortex cores times ``exp(i(Theta_a + h_a))``; boundary values ``exp(i phi_g)``."""
    grid = params.grid
    cfg = params.config
    pos = cfg.positions
    if cfg.M:
        if np.min(np.minimum(pos, 1 - pos)) < 2 * grid.h:
            raise ConfigurationError("vortices must be at least 2h from the boundary")
        if cfg.M > 1:
            d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)[np.triu_indices(cfg.M, 1)]
            if d.min() < 4 * params.eps:
                # the cores overlap; the data are still well defined, only less vortex-like
                log.warning("vortex separation %.3g is below 4 eps = %.3g", d.min(), 4 * params.eps)
    phi = make_boundary_phase(grid, params.boundary, params.amplitude)
    h = solve_harmonic(cfg, phi)
    pts = grid.coords()
    dist = np.linalg.norm(pts[:, None, :] - pos[None, :, :], axis=-1)
    amp = np.prod(core_profile(dist / params.eps), axis=1)
    safe = pts.copy()
    hit = np.any(dist == 0.0, axis=1)
    safe[hit] += 1e-12
    theta = singular_phase(cfg, safe) if cfg.M else 0.0
    u = amp * np.exp(1j * (theta + h.values))
    return ComplexField2D(grid, u, phi.datum())


def nonlinear_substep(u: np.ndarray, tau: float, eps: float) -> np.ndarray:
    """Exact flow of ``i u_t = eps^-2 (1 - |u|^2) u`` over time ``tau``."""
    return u * np.exp(-1j * tau * (1.0 - np.abs(u) ** 2) / eps**2)


@lru_cache(maxsize=4)
def _cn_factor(level: int, dt: float):
    K = assemble_laplacian(Grid2D(level), Scaling.FINITE_DIFFERENCE)
    n = K.shape[0]
    I = sp.identity(n, format="csc", dtype=complex)
    lhs = (I - 0.5j * dt * K).tocsc()
    rhs = (I + 0.5j * dt * K).tocsr()
    return spla.splu(lhs), rhs


def linear_substep(u: np.ndarray, boundary: np.ndarray, grid: Grid2D, dt: float) -> np.ndarray:
    """Crank-Nicolson step of ``i u_t = Delta_h u`` with time-independent Dirichlet data.

    With ``Delta_h u = -K u + b`` the update is
    ``(I - i dt/2 K) u+ = (I + i dt/2 K) u - i dt b``.
    """
    lu, rhs = _cn_factor(grid.level, float(dt))
    b = apply_dirichlet_rhs(grid, boundary, Scaling.FINITE_DIFFERENCE)
    return lu.solve(rhs @ u - 1j * dt * b)


def strang_step(u: ComplexField2D, params: NLSParams) -> ComplexField2D:
    """Nonlinear half step, Crank-Nicolson linear step, nonlinear half step."""
    v = nonlinear_substep(u.values, 0.5 * params.dt, params.eps)
    v = linear_substep(v, u.boundary, u.grid, params.dt)
    v = nonlinear_substep(v, 0.5 * params.dt, params.eps)
    return ComplexField2D(u.grid, v, u.boundary)


def discrete_energy(u: ComplexField2D, eps: float) -> float:
    """``sum_edges 1/2 |du|^2 + h^2 sum_nodes (1 - |u|^2)^2 / (4 eps^2)``."""
    lat = u.lattice()
    grad = 0.5 * (np.sum(np.abs(np.diff(lat, axis=0)) ** 2) + np.sum(np.abs(np.diff(lat, axis=1)) ** 2))
    h = u.grid.h
    pot = h * h * np.sum((1.0 - np.abs(u.values) ** 2) ** 2) / (4 * eps**2)
    return float(grad + pot)


@dataclass
class NLSRun:
    params: NLSParams
    times: list[float] = field(default_factory=list)
    snapshots: list[ComplexField2D] = field(default_factory=list)
    energies: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def final(self) -> ComplexField2D:
        return self.snapshots[-1]

    def manifest(self) -> dict:
        p = asdict(self.params)
        p["positions"] = [list(a) for a in self.params.positions]
        return {
            "params": p,
            "grid_h": self.params.grid.h,
            "steps": int(round(self.params.T / self.params.dt)) if self.params.T else 0,
            "snapshot_times": self.times,
            "energies": self.energies,
            "wall_time_s": self.wall_time,
        }


def evolve_nls(params: NLSParams, snapshot_times=None, u0: ComplexField2D | None = None) -> NLSRun:
    """Strang-split evolution to ``params.T``; snapshots default to ``{0, T/2, T}``.

    The step count is ``ceil(T / dt)`` with the step shortened to land on
    ``T`` exactly; snapshots are taken at the nearest step.
    """
    start = time.perf_counter()
    u = initial_data(params) if u0 is None else u0
    n = math.ceil(params.T / params.dt - 1e-9) if params.T > 0 else 0
    dt = params.T / n if n else params.dt
    step_params = NLSParams(params.eps, params.level, dt, params.T, params.boundary, params.amplitude,
                            params.positions)
    if snapshot_times is None:
        snapshot_times = [0.0, params.T / 2, params.T]
    want = sorted({min(n, int(round(t / dt))) if n else 0 for t in snapshot_times})
    run = NLSRun(params)

    def record(step, field_):
        run.times.append(step * dt)
        run.snapshots.append(field_)
        run.energies.append(discrete_energy(field_, params.eps))

    if 0 in want:
        record(0, u)
    for step in range(1, n + 1):
        u = strang_step(u, step_params)
        if step in want:
            record(step, u)
    run.wall_time = time.perf_counter() - start
    log.info("NLS eps=%g level=%d: %d steps in %.1fs", params.eps, params.level, n, run.wall_time)
    return run


def write_manifest(path, run: NLSRun, extra: dict | None = None) -> None:
    data = run.manifest()
    if extra:
        data.update(extra)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))


_RING = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def _ring_winding(lat: np.ndarray, j: int, i: int) -> int:
    """Phase winding of ``lat`` around the 3x3 ring centred at ``(j, i)``."""
    ring = np.array([lat[j + dj, i + di] for dj, di in _RING])
    steps = np.angle(np.roll(ring, -1) * np.conj(ring))
    return int(np.round(steps.sum() / (2 * np.pi)))


def locate_vortices(u: ComplexField2D, M: int, threshold: float = 0.5) -> VortexConfig:
    """Local minima of ``|u|`` below ``threshold``, refined by a 3x3 quadratic fit of ``|u|^2``.

    Only minima whose surrounding 3x3 ring carries a nonzero phase winding
    count as vortices; shallow minima from grid-scale ripples are ignored.
    """
    grid = u.grid
    lat = u.lattice()
    mod2 = np.abs(lat) ** 2
    inner = mod2[1:-1, 1:-1]
    nb = np.stack([mod2[1 + dj:mod2.shape[0] - 1 + dj, 1 + di:mod2.shape[1] - 1 + di]
                   for dj in (-1, 0, 1) for di in (-1, 0, 1) if dj or di])
    is_min = (inner <= nb.min(axis=0)) & (inner < threshold**2)
    J, I = np.nonzero(is_min)
    cand = [(j + 1, i + 1) for j, i in zip(J, I) if _ring_winding(lat, j + 1, i + 1) != 0]
    if len(cand) != M:
        raise DetectionError(f"found {len(cand)} winding modulus minima below {threshold}, expected {M}")
    h = grid.h
    out = []
    for j, i in cand:
        def offset(fm, f0, fp):
            den = fm - 2 * f0 + fp
            return 0.0 if den <= 0 else float(np.clip(0.5 * (fm - fp) / den, -0.5, 0.5))

        dx = offset(mod2[j, i - 1], mod2[j, i], mod2[j, i + 1])
        dy = offset(mod2[j - 1, i], mod2[j, i], mod2[j + 1, i])
        out.append(((i + dx) * h, (j + dy) * h))
    return VortexConfig(np.array(out))
