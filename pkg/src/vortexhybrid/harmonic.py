"""Harmonic correction ``h_a`` for a vortex configuration.

``h_a`` solves the discrete Dirichlet problem ``K h = b_a`` where the
boundary values are the unwrapped trace of ``phi_g - Theta_a`` along the
perimeter.  ``K`` never depends on the configuration; only ``b_a`` does.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from . import bpx as bpx_mod
from .grid2d import (
    ComplexField2D,
    Grid2D,
    GridDomainError,
    Scaling,
    apply_dirichlet_rhs,
    assemble_laplacian,
    gradient_stencil,
    interpolation_stencil,
)
from .vortex import VortexConfig, singular_phase

log = logging.getLogger(__name__)

DEFAULT_AMPLITUDE = 0.3
DENSE_MAX_LEVEL = 6


class WindingMismatchError(ValueError):
    """The unwrapped boundary trace does not close: boundary degree != vortex count."""


class Solver(str, enum.Enum):
    DIRECT_DENSE = "direct"
    SPARSE_DIRECT = "sparse"
    BPX_CG = "bpx_cg"


@dataclass(frozen=True)
class BoundaryPhase:
    """Continuous lifting ``phi_g`` of the boundary datum on the perimeter nodes."""

    grid: Grid2D
    phi: np.ndarray
    winding: int

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        if phi.shape != (self.grid.num_boundary,):
            raise ValueError("phi_g must have one value per perimeter node")
        object.__setattr__(self, "phi", phi)
        total = _closed_increment(phi)
        if abs(total - 2 * np.pi * self.winding) > 1e-8:
            raise WindingMismatchError(
                f"phi_g increments by {total:.6g} around the boundary, not 2*pi*{self.winding}"
            )

    def datum(self) -> np.ndarray:
        """``g = exp(i phi_g)`` at the perimeter nodes."""
        return np.exp(1j * self.phi)


def _closed_increment(trace: np.ndarray) -> float:
    """Total increment of a continuous perimeter trace including the closing step."""
    last = trace[0] - trace[-1]
    last = last - 2 * np.pi * np.round(last / (2 * np.pi))
    return float(trace[-1] - trace[0] + last)


def lift_boundary_phase(grid: Grid2D, raw: np.ndarray) -> BoundaryPhase:
    """Lift principal-branch phase samples into a continuous perimeter trace."""
    phi = np.unwrap(np.asarray(raw, dtype=float))
    total = _closed_increment(phi)
    winding = int(np.round(total / (2 * np.pi)))
    return BoundaryPhase(grid, phi, winding)


def default_boundary_phase(grid: Grid2D, amplitude: float = DEFAULT_AMPLITUDE) -> BoundaryPhase:
    """Degree-2 datum ``2 atan2(y-1/2, x-1/2) + amplitude sin(2 pi x) sin(2 pi y)``."""
    xy = grid.boundary_coords()
    x, y = xy[:, 0], xy[:, 1]
    angle = np.unwrap(np.arctan2(y - 0.5, x - 0.5))
    phi = 2.0 * angle + amplitude * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
    return BoundaryPhase(grid, phi, 2)


def centered_boundary_phase(grid: Grid2D, degree: int = 1) -> BoundaryPhase:
    """Radially symmetric datum ``degree * atan2(y-1/2, x-1/2)``."""
    xy = grid.boundary_coords()
    angle = np.unwrap(np.arctan2(xy[:, 1] - 0.5, xy[:, 0] - 0.5))
    return BoundaryPhase(grid, degree * angle, degree)


def boundary_phase_from_function(grid: Grid2D, fn) -> BoundaryPhase:
    """Lift ``fn(x, y)`` sampled on the perimeter (values may be principal-branch)."""
    xy = grid.boundary_coords()
    return lift_boundary_phase(grid, fn(xy[:, 0], xy[:, 1]))


def boundary_phase_from_table(grid: Grid2D, path) -> BoundaryPhase:
    """Read perimeter values from a CSV with a ``phi`` column (or a single column)."""
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if any(not _is_number(c) for c in header):
        col = header.index("phi") if "phi" in header else len(header) - 1
        rows = rows[1:]
    else:
        col = len(header) - 1
    vals = np.array([float(r[col]) for r in rows if r])
    if vals.shape[0] != grid.num_boundary:
        raise ValueError(f"table has {vals.shape[0]} rows, grid perimeter has {grid.num_boundary}")
    return lift_boundary_phase(grid, vals)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def make_boundary_phase(grid: Grid2D, name: str = "default-deg2", amplitude: float = DEFAULT_AMPLITUDE) -> BoundaryPhase:
    """Resolve a boundary-phase name: ``default-deg2``, ``centered-deg1`` or a CSV path."""
    if name == "default-deg2":
        return default_boundary_phase(grid, amplitude)
    if name.startswith("centered-deg"):
        return centered_boundary_phase(grid, int(name[len("centered-deg"):]))
    return boundary_phase_from_table(grid, name)


def unwrap_boundary_phase(config: VortexConfig, phi_g: BoundaryPhase) -> np.ndarray:
    """Continuous single-valued lifting of ``phi_g - Theta_a`` along the perimeter.

    Raises :class:`WindingMismatchError` if the trace fails to close, i.e.
    the boundary degree differs from the number of vortices.
    """
    grid = phi_g.grid
    if config.M:
        margin = np.min(np.minimum(config.positions, 1 - config.positions))
        if margin < 2 * grid.h - 1e-14:
            raise GridDomainError("vortices must lie at least 2h from the boundary")
    theta = singular_phase(config, grid.boundary_coords()) if config.M else np.zeros(grid.num_boundary)
    trace = np.unwrap(phi_g.phi - theta)
    defect = _closed_increment(trace)
    if abs(defect) > 1e-6 * 2 * np.pi:
        raise WindingMismatchError(
            f"boundary trace does not close (defect {defect:.4g}); degree {phi_g.winding} vs {config.M} vortices"
        )
    return trace


# -- solvers --------------------------------------------------------------------

@lru_cache(maxsize=8)
def _dense_factor(level: int):
    K = assemble_laplacian(Grid2D(level), Scaling.STIFFNESS).toarray()
    return sla.cho_factor(K)


@lru_cache(maxsize=8)
def _sparse_factor(level: int):
    K = assemble_laplacian(Grid2D(level), Scaling.STIFFNESS).tocsc()
    return spla.splu(K)


@lru_cache(maxsize=8)
def _cached_bpx(dim: int, level: int):
    return bpx_mod.build_bpx(dim, level)


@dataclass(frozen=True)
class HarmonicField:
    grid: Grid2D
    values: np.ndarray
    boundary: np.ndarray
    config: VortexConfig
    residual: float
    iterations: int = 0

    def lattice(self) -> np.ndarray:
        return self.grid.full_lattice(self.values, self.boundary)

    def gradient_at(self, point) -> np.ndarray:
        idx, wx, wy = gradient_stencil(self.grid, point)
        v = self.values[idx]
        return np.array([wx @ v, wy @ v])


def solve_dirichlet(grid: Grid2D, boundary: np.ndarray, solver: Solver | str = Solver.SPARSE_DIRECT,
                    tol: float = 1e-10, maxiter: int = 500):
    """Solve ``K h = b(boundary)`` with the stiffness Laplacian; returns ``(h, residual, iterations)``."""
    solver = Solver(solver)
    K = assemble_laplacian(grid, Scaling.STIFFNESS)
    b = apply_dirichlet_rhs(grid, boundary, Scaling.STIFFNESS)
    its = 0
    if solver is Solver.DIRECT_DENSE:
        if grid.level > DENSE_MAX_LEVEL:
            raise ValueError(f"dense direct solve is limited to level <= {DENSE_MAX_LEVEL}")
        h = sla.cho_solve(_dense_factor(grid.level), b)
    elif solver is Solver.SPARSE_DIRECT:
        h = _sparse_factor(grid.level).solve(b)
    else:
        res = bpx_mod.pcg(K, b, _cached_bpx(2, grid.level).apply, tol=tol, maxiter=maxiter)
        h, its = res.x, res.iterations
    bn = np.linalg.norm(b)
    rel = float(np.linalg.norm(K @ h - b) / bn) if bn else 0.0
    return h, rel, its


def solve_harmonic(config: VortexConfig, phi_g: BoundaryPhase, solver: Solver | str = Solver.SPARSE_DIRECT,
                   tol: float = 1e-10) -> HarmonicField:
    """Harmonic correction for ``config`` with boundary datum ``phi_g``."""
    trace = unwrap_boundary_phase(config, phi_g)
    h, rel, its = solve_dirichlet(phi_g.grid, trace, solver, tol)
    return HarmonicField(phi_g.grid, h, trace, config, rel, its)


def reconstruct_outer(config: VortexConfig, field: HarmonicField) -> ComplexField2D:
    """``u_a = exp(i(Theta_a + h_a))`` at the interior nodes (unit modulus)."""
    grid = field.grid
    pts = grid.coords()
    if config.M:
        diff = pts[:, None, :] - config.positions[None, :, :]
        on_vortex = np.any(np.all(diff == 0.0, axis=-1), axis=1)
        if np.any(on_vortex):
            log.info("reconstruct_outer: %d node(s) coincide with a vortex; using a 1e-12 diagonal offset",
                     int(on_vortex.sum()))
            pts = pts.copy()
            pts[on_vortex] += 1e-12
        theta = singular_phase(config, pts)
    else:
        theta = np.zeros(grid.num_nodes)
    u = np.exp(1j * (theta + field.values))
    return ComplexField2D(grid, u, np.exp(1j * (_boundary_theta(config, grid) + field.boundary)))


def _boundary_theta(config: VortexConfig, grid: Grid2D) -> np.ndarray:
    if not config.M:
        return np.zeros(grid.num_boundary)
    return singular_phase(config, grid.boundary_coords())


# -- observables ----------------------------------------------------------------

class ObservableKind(str, enum.Enum):
    POINT_VALUE = "value"
    GRADIENT_X = "grad_x"
    GRADIENT_Y = "grad_y"


@dataclass(frozen=True)
class ObservableFunctional:
    kind: ObservableKind
    location: tuple[float, float]
    indices: np.ndarray
    coefficients: np.ndarray
    size: int

    def dense(self) -> np.ndarray:
        c = np.zeros(self.size)
        c[self.indices] = self.coefficients
        return c

    def __call__(self, values: np.ndarray):
        return self.coefficients @ np.asarray(values)[self.indices]


def build_observable(kind: ObservableKind | str, location, grid: Grid2D) -> ObservableFunctional:
    """Sparse ``c`` with ``<c, h>`` equal to the interpolated value or gradient."""
    kind = ObservableKind(kind)
    loc = (float(location[0]), float(location[1]))
    margin = min(loc[0], loc[1], 1 - loc[0], 1 - loc[1])
    if margin < 2 * grid.h - 1e-12:
        raise GridDomainError(f"observable location {loc} is closer than 2h to the boundary")
    if kind is ObservableKind.POINT_VALUE:
        idx, w = interpolation_stencil(grid, loc)
    else:
        idx, wx, wy = gradient_stencil(grid, loc)
        w = wx if kind is ObservableKind.GRADIENT_X else wy
    return ObservableFunctional(kind, loc, idx, w, grid.num_nodes)


def observation_matrix(observables: list[ObservableFunctional]) -> np.ndarray:
    """Stack observables into ``C`` with ``O(h) = C h``."""
    return np.vstack([o.dense() for o in observables])


def feedback_observables(config: VortexConfig, grid: Grid2D) -> list[ObservableFunctional]:
    """GradientX/GradientY at every vortex, in the order ``(a1x, a1y, a2x, ...)``."""
    out = []
    for a in config.positions:
        out.append(build_observable(ObservableKind.GRADIENT_X, a, grid))
        out.append(build_observable(ObservableKind.GRADIENT_Y, a, grid))
    return out


class DirectFeedback:
    """Feedback provider returning ``grad h_a(a_j)`` from a classical solve."""

    def __init__(self, phi_g: BoundaryPhase, solver: Solver | str = Solver.SPARSE_DIRECT, tol: float = 1e-10):
        self.phi_g = phi_g
        self.solver = Solver(solver)
        self.tol = tol
        self.log: list[tuple[float, np.ndarray]] = []

    def field(self, config: VortexConfig) -> HarmonicField:
        return solve_harmonic(config, self.phi_g, self.solver, self.tol)

    def __call__(self, config: VortexConfig) -> np.ndarray:
        fld = self.field(config)
        obs = feedback_observables(config, fld.grid)
        g = np.array([o(fld.values) for o in obs]).reshape(-1, 2)
        self.log.append((config.t, g))
        return g
