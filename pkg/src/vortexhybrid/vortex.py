"""Reduced point-vortex state, motion laws and integrators.

Laws (``x_perp = (-x2, x1)``, ``grad_perp f = (-f_y, f_x)``)::

    NLS_M1      da_j/dt = -2 sum_k (a_j - a_k)_perp / |a_j - a_k|^2
    NLS_M2      da_j/dt = -2 (sum_k (a_j - a_k)_perp / |a_j - a_k|^2 + grad h(a_j))
    GL_FREE     da_j/dt =  2 sum_k (a_j - a_k) / |a_j - a_k|^2
    GL_BOUNDED  da_j/dt =  2 sum_k (a_j - a_k) / |a_j - a_k|^2 - 2 grad_perp h(a_j)

The coupled laws need a feedback provider: a callable mapping a
:class:`VortexConfig` to the ``(M, 2)`` array of ``grad h_a(a_j)``.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.spatial.distance import pdist

COLLISION_TOL = 10.0 * np.sqrt(np.finfo(float).eps)

FeedbackProvider = Callable[["VortexConfig"], np.ndarray]


class VortexError(RuntimeError):
    pass


class CollisionError(VortexError):
    pass


class DomainExitError(VortexError):
    pass


class SingularityError(VortexError):
    pass


class IterationError(VortexError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class GeometryError(VortexError):
    pass


@dataclass(frozen=True)
class VortexConfig:
    """Positions of ``M`` unit vortices at time ``t``.

    ``bounded=True`` (the default) requires every vortex strictly inside the
    unit square; free-plane configurations set it to False.
    """

    positions: np.ndarray
    t: float = 0.0
    bounded: bool = True

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1, 2)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        if self.bounded and pos.size and not np.all((pos > 0.0) & (pos < 1.0)):
            raise DomainExitError(f"vortex outside the unit square: {pos.tolist()}")
        if len(pos) > 1:
            d = _pair_distances(pos)
            if d.min() <= 0.0:
                raise CollisionError("vortex positions must be distinct")

    @property
    def M(self) -> int:
        return self.positions.shape[0]

    def moved(self, positions, t: float) -> "VortexConfig":
        return VortexConfig(positions, t, self.bounded)


def _pair_distances(pos: np.ndarray) -> np.ndarray:
    return pdist(pos)


class LawKind(str, enum.Enum):
    NLS_M1 = "nls_m1"
    NLS_M2 = "nls_m2"
    GL_FREE = "gl_free"
    GL_BOUNDED = "gl_bounded"

    @property
    def coupled(self) -> bool:
        return self in (LawKind.NLS_M2, LawKind.GL_BOUNDED)


@dataclass(frozen=True)
class MotionLaw:
    kind: LawKind
    feedback: FeedbackProvider | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", LawKind(self.kind))
        if self.kind.coupled and self.feedback is None:
            raise ValueError(f"{self.kind.value} needs a feedback provider for grad h_a")


NLS_M1 = MotionLaw(LawKind.NLS_M1)
GL_FREE = MotionLaw(LawKind.GL_FREE)


def perp(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def singular_phase(config: VortexConfig, points) -> np.ndarray | float:
    """Sum of principal-branch polar angles ``atan2`` about each vortex."""
    pts = np.asarray(points, dtype=float)
    scalar = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    dx = pts[:, None, 0] - config.positions[None, :, 0]
    dy = pts[:, None, 1] - config.positions[None, :, 1]
    if np.any((dx == 0.0) & (dy == 0.0)):
        raise SingularityError("singular phase evaluated at a vortex")
    theta = np.arctan2(dy, dx).sum(axis=1)
    return float(theta[0]) if scalar else theta


def singular_phase_gradient(config: VortexConfig, points) -> np.ndarray:
    """``grad Theta_a = sum_j (x - a_j)_perp / |x - a_j|^2`` at ``points``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    diff = pts[:, None, :] - config.positions[None, :, :]
    r2 = (diff**2).sum(-1)
    return (perp(diff) / r2[..., None]).sum(axis=1)


def _interaction(pos: np.ndarray) -> np.ndarray:
    """``sum_{k != j} (a_j - a_k) / |a_j - a_k|^2`` for each ``j``."""
    diff = pos[:, None, :] - pos[None, :, :]
    r2 = (diff**2).sum(-1)
    np.fill_diagonal(r2, np.inf)
    if len(pos) > 1 and np.sqrt(r2.min()) < COLLISION_TOL:
        raise CollisionError(f"vortices closer than {COLLISION_TOL:.2e}")
    return (diff / r2[..., None]).sum(axis=1)


def _uncoupled_velocity(pos: np.ndarray, kind: LawKind) -> np.ndarray:
    inter = _interaction(pos)
    if kind is LawKind.NLS_M1:
        return -2.0 * perp(inter)
    return 2.0 * inter


def velocity(config: VortexConfig, law: MotionLaw = NLS_M1) -> np.ndarray:
    """Vortex velocities ``(M, 2)`` for the given motion law."""
    pos = config.positions
    kind = law.kind
    if not kind.coupled:
        return _uncoupled_velocity(pos, kind)
    inter = _interaction(pos)
    grad_h = np.asarray(law.feedback(config), dtype=float).reshape(pos.shape)
    if kind is LawKind.NLS_M2:
        return -2.0 * (perp(inter) + grad_h)
    return 2.0 * inter - 2.0 * perp(grad_h)


def _checked(config: VortexConfig, new_pos: np.ndarray, dt: float) -> VortexConfig:
    if config.bounded and not np.all((new_pos > 0.0) & (new_pos < 1.0)):
        raise DomainExitError(f"vortex left the domain at t={config.t + dt:g}")
    return config.moved(new_pos, config.t + dt)


def step_explicit(config: VortexConfig, law: MotionLaw, dt: float) -> VortexConfig:
    """Forward Euler step ``a <- a + dt v(a)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return _checked(config, config.positions + dt * velocity(config, law), dt)


def step_midpoint(config: VortexConfig, law: MotionLaw, dt: float,
                  newton_tol: float = 1e-13, max_iter: int = 100) -> VortexConfig:
    """Implicit midpoint step solved by fixed-point iteration.

    Iterates ``a1 = a0 + dt v((a0 + a1)/2)`` until the update falls below
    ``newton_tol``.  Intended for the Hamiltonian law ``NLS_M1``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    a0 = config.positions
    if law.kind.coupled:
        def vel(pos, t):
            return velocity(VortexConfig(pos, t, bounded=False), law)
    else:
        # positions-only evaluation skips the per-iteration config validation
        def vel(pos, t):
            return _uncoupled_velocity(pos, law.kind)
    a1 = a0 + dt * vel(a0, config.t)
    res = np.inf
    for _ in range(max_iter):
        a_new = a0 + dt * vel(0.5 * (a0 + a1), config.t + 0.5 * dt)
        res = float(np.max(np.abs(a_new - a1)))
        a1 = a_new
        if res <= newton_tol:
            return _checked(config, a1, dt)
    raise IterationError(f"implicit midpoint did not converge (residual {res:.3e})", res)


def integrate_trajectory(config: VortexConfig, law: MotionLaw, dt: float, T: float,
                         method: str = "explicit", stride: int = 1) -> list[VortexConfig]:
    """March from ``config.t`` to ``T`` with a uniform step near ``dt``."""
    steps = max(1, int(round((T - config.t) / dt)))
    dt_eff = (T - config.t) / steps
    stepper = step_explicit if method == "explicit" else step_midpoint
    out = [config]
    cur = config
    for m in range(1, steps + 1):
        cur = stepper(cur, law, dt_eff)
        if m % stride == 0 or m == steps:
            out.append(cur)
    return out


def write_trajectory(path, trajectory: list[VortexConfig]) -> None:
    """Trajectory CSV with columns ``t, a1x, a1y, ..., aMx, aMy``."""
    M = trajectory[0].M
    header = ["t"] + [f"a{j + 1}{c}" for j in range(M) for c in "xy"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for cfg in trajectory:
            w.writerow([repr(float(cfg.t))] + [repr(float(v)) for v in cfg.positions.ravel()])


def read_trajectory(path) -> list[VortexConfig]:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    out = []
    for row in rows[1:]:
        vals = [float(v) for v in row]
        out.append(VortexConfig(np.array(vals[1:]).reshape(-1, 2), vals[0], bounded=False))
    return out


# -- renormalized energy ------------------------------------------------------

def _ray_length(a: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Distance from ``a`` to the unit-square boundary along direction ``theta``."""
    c, s = np.cos(theta), np.sin(theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(c > 0, (1 - a[0]) / c, np.where(c < 0, -a[0] / c, np.inf))
        ty = np.where(s > 0, (1 - a[1]) / s, np.where(s < 0, -a[1] / s, np.inf))
    return np.minimum(tx, ty)


def _corner_angles(a: np.ndarray) -> list[float]:
    corners = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]])
    ang = np.sort(np.mod(np.arctan2(corners[:, 1] - a[1], corners[:, 0] - a[0]), 2 * np.pi))
    return [0.0, *ang.tolist(), 2 * np.pi]


def _polar_moments(a: np.ndarray) -> tuple[float, np.ndarray]:
    """``int log rho_b dtheta`` and ``int rho_b (-sin, cos) dtheta`` over a full turn."""
    brk = _corner_angles(a)
    log_int = 0.0
    vec = np.zeros(2)
    for lo, hi in zip(brk[:-1], brk[1:]):
        if hi - lo < 1e-15:
            continue
        log_int += integrate.quad(lambda t: np.log(_ray_length(a, t)), lo, hi, epsabs=1e-13, epsrel=1e-12)[0]
        vec[0] += integrate.quad(lambda t: -np.sin(t) * _ray_length(a, t), lo, hi, epsabs=1e-13, epsrel=1e-12)[0]
        vec[1] += integrate.quad(lambda t: np.cos(t) * _ray_length(a, t), lo, hi, epsabs=1e-13, epsrel=1e-12)[0]
    return log_int, vec


def _trapezoid_weights(N: int, h: float) -> np.ndarray:
    w1 = np.full(N + 1, h)
    w1[0] = w1[-1] = 0.5 * h
    return np.outer(w1, w1)


def renormalized_energy(config: VortexConfig, h_provider, r: float) -> float:
    """Finite part of the Dirichlet energy of ``u_a = exp(i(Theta_a + h_a))``.

    Returns ``(1/2pi) int_{Omega minus disks} |grad u_a|^2 - M log(1/r)`` with
    the universal constant dropped.  The integrand is split into the
    vortex-core model ``sum_j [1/rho_j^2 + 2 grad theta_j . G_j]`` (with
    ``G_j`` the smooth gradient at ``a_j``), integrated exactly over
    ``Omega minus B_r(a_j)`` in polar coordinates, and a bounded remainder
    integrated with the trapezoid rule on the full lattice.  All terms of
    order ``r^2`` are dropped, so the value is the ``r -> 0`` finite part and
    ``r`` only enters through the geometry check.

    ``h_provider(config)`` must return a solved harmonic field exposing
    ``grid``, ``values`` and ``boundary`` (see :mod:`vortexhybrid.harmonic`).
    """
    from .grid2d import sample_gradient

    pos = config.positions
    M = config.M
    if M:
        dist_bnd = np.min(np.minimum(pos, 1 - pos))
        min_sep = min(dist_bnd, _pair_distances(pos).min() if M > 1 else np.inf)
        if not 0 < r < 0.5 * min_sep:
            raise GeometryError(f"core radius {r} must be below half the minimal separation {min_sep:.4g}")
    field_h = h_provider(config)
    grid = field_h.grid
    N = 2**grid.level
    hh = grid.h
    lat = grid.full_lattice(field_h.values, field_h.boundary)
    gy, gx = np.gradient(lat, hh, edge_order=2)
    t = hh * np.arange(N + 1)
    X, Y = np.meshgrid(t, t, indexing="xy")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    grad_h = np.column_stack([gx.ravel(), gy.ravel()])

    # smooth gradient at each vortex: other vortices plus grad h
    G = np.zeros((M, 2))
    for j in range(M):
        others = np.delete(pos, j, axis=0)
        if len(others):
            G[j] = (perp(pos[j] - others) / ((pos[j] - others) ** 2).sum(-1)[:, None]).sum(0)
        G[j] += sample_gradient(grid, field_h.values, pos[j])

    diff = pts[:, None, :] - pos[None, :, :]
    r2 = (diff**2).sum(-1)
    hit = r2 < 1e-20
    r2 = np.where(hit, np.inf, r2)
    gtheta = perp(diff) / r2[..., None]  # (P, M, 2)
    total_grad = gtheta.sum(1) + grad_h
    rem = (total_grad**2).sum(-1)
    rem -= (1.0 / r2).sum(1)
    rem -= 2.0 * np.einsum("pmk,mk->p", gtheta, G)
    integral = (_trapezoid_weights(N, hh).ravel() * rem).sum()

    for j in range(M):
        log_int, vec = _polar_moments(pos[j])
        integral += log_int + 2.0 * vec @ G[j]
    return integral / (2 * np.pi)


def energy_gradient(config: VortexConfig, h_provider, r: float, fd_step: float) -> np.ndarray:
    """Central finite-difference ``grad_{a_j} W`` as an ``(M, 2)`` array."""
    grad = np.zeros((config.M, 2))
    for j in range(config.M):
        for c in range(2):
            plus = config.positions.copy()
            minus = config.positions.copy()
            plus[j, c] += fd_step
            minus[j, c] -= fd_step
            wp = renormalized_energy(config.moved(plus, config.t), h_provider, r)
            wm = renormalized_energy(config.moved(minus, config.t), h_provider, r)
            grad[j, c] = (wp - wm) / (2 * fd_step)
    return grad


@dataclass
class IdentityCheck:
    residual: float
    j_grad_w: np.ndarray
    m2_velocity: np.ndarray

    @property
    def relative(self) -> float:
        return self.residual / float(np.max(np.linalg.norm(self.j_grad_w, axis=1)))


def motion_law_identity(config: VortexConfig, h_provider, fd_step: float, r: float | None = None) -> IdentityCheck:
    """Compare ``J grad_{a_j} W`` with ``-2 grad H_j(a_j)`` (the M2 velocity)."""
    if r is None:
        pos = config.positions
        sep = np.min(np.minimum(pos, 1 - pos))
        if config.M > 1:
            sep = min(sep, _pair_distances(pos).min())
        r = 0.25 * sep
    gw = energy_gradient(config, h_provider, r, fd_step)
    jgw = perp(gw)  # J = [[0, -1], [1, 0]] acts as the perp map

    def feedback(cfg):
        from .grid2d import sample_gradient
        fld = h_provider(cfg)
        return np.array([sample_gradient(fld.grid, fld.values, a) for a in cfg.positions])

    v = velocity(config, MotionLaw(LawKind.NLS_M2, feedback))
    res = float(np.max(np.linalg.norm(jgw - v, axis=1)))
    return IdentityCheck(res, jgw, v)


def motion_law_identity_residual(config: VortexConfig, h_provider, fd_step: float, r: float | None = None) -> float:
    return motion_law_identity(config, h_provider, fd_step, r).residual
