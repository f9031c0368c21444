"""Closed vortex filaments in the unit cube: curvature flow and the London field.

Curves are closed polygons.  The curvature vector at node ``s`` uses the
three-point formula

    kappa n = 2 (l- (X+ - X) - l+ (X - X-)) / (l+ l- (l+ + l-)),

with ``l+ = |X+ - X|`` and ``l- = |X - X-|``, which reproduces ``1/R`` exactly
on a regular polygon inscribed in a circle of radius ``R``.

The London field solves ``(K + h^3 I) H = f`` on the interior nodes of a
dyadic grid with homogeneous Dirichlet data, where ``K`` is the stiffness
scaled seven-point Laplacian.  Dividing by ``h^3`` gives
``(-Delta_h + I) H = f / h^3``, so ``f`` is the unnormalised trilinear
deposit of ``2 pi ell ds`` along the curve.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from . import bpx as bpx_mod
from .grid2d import Scaling, dyadic_laplacian

log = logging.getLogger(__name__)

SPACING_BAND = (0.5, 2.0)


class FilamentGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class FilamentCurve:
    nodes: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        X = np.array(self.nodes, dtype=float)
        if X.ndim != 2 or X.shape[1] != 3 or X.shape[0] < 3:
            raise FilamentGeometryError("a filament needs at least three 3D nodes")
        X.setflags(write=False)
        object.__setattr__(self, "nodes", X)

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    def segments(self) -> np.ndarray:
        """``X_{s+1} - X_s`` for every segment (cyclic)."""
        return np.roll(self.nodes, -1, axis=0) - self.nodes

    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.segments(), axis=1)

    def length(self) -> float:
        return float(self.spacing().sum())

    def tangents(self) -> np.ndarray:
        """Unit tangent of every segment."""
        seg = self.segments()
        return seg / np.linalg.norm(seg, axis=1)[:, None]

    def curvature(self) -> np.ndarray:
        """Discrete curvature vectors ``kappa n`` at the nodes."""
        X = self.nodes
        Xp = np.roll(X, -1, axis=0)
        Xm = np.roll(X, 1, axis=0)
        lp = np.linalg.norm(Xp - X, axis=1)[:, None]
        lm = np.linalg.norm(X - Xm, axis=1)[:, None]
        return 2.0 * (lm * (Xp - X) - lp * (X - Xm)) / (lp * lm * (lp + lm))

    def centroid(self) -> np.ndarray:
        return self.nodes.mean(axis=0)

    def mean_radius(self) -> float:
        return float(np.linalg.norm(self.nodes - self.centroid(), axis=1).mean())

    def enclosed_area(self) -> float:
        """Magnitude of the vector area ``1/2 sum X_s x X_{s+1}`` (planar curves)."""
        X = self.nodes - self.centroid()
        return float(0.5 * np.linalg.norm(np.cross(X, np.roll(X, -1, axis=0)).sum(axis=0)))

    def spacing_ok(self) -> bool:
        l = self.spacing()
        lo, hi = SPACING_BAND
        return bool(l.min() >= lo * l.mean() and l.max() <= hi * l.mean())


def circle(radius: float, n: int, center=(0.5, 0.5, 0.5), normal: str = "z", phase: float = 0.0) -> FilamentCurve:
    """Regular ``n``-gon inscribed in a circle, oriented counterclockwise about ``normal``."""
    th = phase + 2 * np.pi * np.arange(n) / n
    c, s = radius * np.cos(th), radius * np.sin(th)
    z = np.zeros(n)
    axes = {"z": (c, s, z), "x": (z, c, s), "y": (s, z, c)}
    return FilamentCurve(np.column_stack(axes[normal]) + np.asarray(center, float))


def ellipse(a: float, b: float, n: int, center=(0.5, 0.5, 0.5)) -> FilamentCurve:
    th = 2 * np.pi * np.arange(n) / n
    return FilamentCurve(np.column_stack([a * np.cos(th), b * np.sin(th), np.zeros(n)]) + np.asarray(center, float))


def remesh(curve: FilamentCurve) -> FilamentCurve:
    """Redistribute the nodes uniformly in arclength along the polygon."""
    l = curve.spacing()
    L = l.sum()
    if not L > 0 or np.any(~np.isfinite(l)):
        raise FilamentGeometryError("degenerate filament (zero length)")
    s = np.concatenate([[0.0], np.cumsum(l)])
    X = np.vstack([curve.nodes, curve.nodes[:1]])
    target = L * np.arange(curve.n) / curve.n
    new = np.column_stack([np.interp(target, s, X[:, c]) for c in range(3)])
    out = FilamentCurve(new, curve.t)
    if not out.spacing_ok():
        raise FilamentGeometryError("spacing guard still violated after remeshing")
    return out


def curvature_flow_step(curve: FilamentCurve, dt: float) -> FilamentCurve:
    """Advance ``X_t = kappa n`` by ``dt`` with forward Euler.

    When ``dt`` exceeds the parabolic limit ``(min spacing)^2 / 4`` the step
    is split into equal substeps that respect it.  The curve is remeshed by
    arclength whenever the spacing leaves ``[0.5, 2]`` times the mean.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cur = curve
    remaining = dt
    while remaining > 0:
        limit = cur.spacing().min() ** 2 / 4
        if not limit > 0:
            raise FilamentGeometryError("coincident filament nodes")
        k = max(1, math.ceil(remaining / limit - 1e-12))
        tau = remaining / k
        cur = FilamentCurve(cur.nodes + tau * cur.curvature(), cur.t + tau)
        remaining -= tau
        if remaining < 1e-15 * dt:
            remaining = 0.0
        if not cur.spacing_ok():
            cur = remesh(cur)
    return cur


def evolve_curve(curve: FilamentCurve, dt: float, T: float, stop_radius: float | None = None,
                 stride: int = 1) -> list[FilamentCurve]:
    """Step to ``T`` (or until the mean radius falls below ``stop_radius``)."""
    out = [curve]
    cur = curve
    steps = int(round(T / dt))
    for m in range(1, steps + 1):
        cur = curvature_flow_step(cur, dt)
        if stop_radius is not None and cur.mean_radius() < stop_radius:
            out.append(cur)
            break
        if m % stride == 0:
            out.append(cur)
    return out


def write_curves(path, curves: list[FilamentCurve]) -> None:
    """CSV with columns ``snapshot, t, s, x, y, z``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["snapshot", "t", "s", "x", "y", "z"])
        for k, c in enumerate(curves):
            for s, (x, y, z) in enumerate(c.nodes):
                w.writerow([k, repr(float(c.t)), s, repr(float(x)), repr(float(y)), repr(float(z))])


def read_curves(path) -> list[FilamentCurve]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    out, cur, t, key = [], [], 0.0, None
    for r in rows:
        if key is not None and r["snapshot"] != key:
            out.append(FilamentCurve(np.array(cur), t))
            cur = []
        key, t = r["snapshot"], float(r["t"])
        cur.append([float(r["x"]), float(r["y"]), float(r["z"])])
    if cur:
        out.append(FilamentCurve(np.array(cur), t))
    return out


# -- London field ------------------------------------------------------------------

@dataclass(frozen=True)
class Grid3D:
    level: int

    @property
    def h(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def n(self) -> int:
        return 2**self.level - 1

    @property
    def num_nodes(self) -> int:
        return self.n**3

    def index(self, i, j, k):
        """Flat index of interior node ``(i, j, k)`` (zero based, x fastest)."""
        return np.asarray(i) + self.n * (np.asarray(j) + self.n * np.asarray(k))

    def _cell(self, points: np.ndarray):
        q = np.asarray(points, float) / self.h - 1.0
        base = np.floor(q).astype(int)
        if np.any(base < 0) or np.any(base > self.n - 2):
            raise FilamentGeometryError("point lies outside the interior cells of the grid")
        return base, q - base

    def trilinear(self, points: np.ndarray):
        """Indices ``(P, 8)`` and weights ``(P, 8)`` of trilinear interpolation."""
        base, f = self._cell(np.atleast_2d(points))
        idx, wts = [], []
        for dk in (0, 1):
            for dj in (0, 1):
                for di in (0, 1):
                    idx.append(self.index(base[:, 0] + di, base[:, 1] + dj, base[:, 2] + dk))
                    wts.append(np.where(di, f[:, 0], 1 - f[:, 0]) * np.where(dj, f[:, 1], 1 - f[:, 1])
                               * np.where(dk, f[:, 2], 1 - f[:, 2]))
        return np.stack(idx, axis=1), np.stack(wts, axis=1)


def _subdivide(curve: FilamentCurve, max_len: float):
    """Midpoints, lengths and unit tangents of sub-segments no longer than ``max_len``."""
    X = curve.nodes
    seg = curve.segments()
    l = np.linalg.norm(seg, axis=1)
    k = np.maximum(1, np.ceil(l / max_len).astype(int))
    owner = np.repeat(np.arange(curve.n), k)
    frac = np.concatenate([(np.arange(m) + 0.5) / m for m in k])
    mids = X[owner] + frac[:, None] * seg[owner]
    ds = (l / k)[owner]
    tang = (seg / l[:, None])[owner]
    return mids, ds, tang


def assemble_filament_source(curve: FilamentCurve, grid: Grid3D) -> np.ndarray:
    """Trilinear deposit of ``2 pi ell ds`` onto the interior nodes, shape ``(N, 3)``.

    Segments longer than ``h/2`` are split so every deposit point spreads
    over its own cell.  The deposit is not divided by ``h^3``; that factor is
    carried by the stiffness-scaled operator.
    """
    X = curve.nodes
    if np.any(X < 2 * grid.h) or np.any(X > 1 - 2 * grid.h):
        raise FilamentGeometryError("filament must stay 2h away from the cube boundary")
    mids, ds, tang = _subdivide(curve, 0.5 * grid.h)
    idx, w = grid.trilinear(mids)
    f = np.zeros((grid.num_nodes, 3))
    for c in range(3):
        np.add.at(f[:, c], idx.ravel(), (w * (2 * np.pi * ds * tang[:, c])[:, None]).ravel())
    return f


@lru_cache(maxsize=4)
def _london_operator(level: int):
    K = dyadic_laplacian(3, level, Scaling.STIFFNESS)
    h = 2.0 ** (-level)
    return (K + h**3 * sp.identity(K.shape[0])).tocsr()


@lru_cache(maxsize=4)
def _london_bpx(level: int):
    return bpx_mod.build_bpx(3, level)


@dataclass(frozen=True)
class LondonField:
    grid: Grid3D
    H: np.ndarray
    curve: FilamentCurve
    residuals: tuple
    iterations: tuple

    def at(self, point) -> np.ndarray:
        idx, w = self.grid.trilinear(np.atleast_2d(point))
        return (w[0][:, None] * self.H[idx[0]]).sum(axis=0)


def solve_london(curve: FilamentCurve, grid: Grid3D, solver: str = "bpx_cg", tol: float = 1e-10,
                 maxiter: int = 500) -> LondonField:
    """Solve ``(K + h^3 I) H = f`` componentwise with zero Dirichlet data."""
    A = _london_operator(grid.level)
    f = assemble_filament_source(curve, grid)
    H = np.zeros_like(f)
    res, its = [], []
    for c in range(3):
        b = f[:, c]
        if not np.any(b):
            res.append(0.0)
            its.append(0)
            continue
        if solver == "bpx_cg":
            out = bpx_mod.pcg(A, b, _london_bpx(grid.level).apply, tol=tol, maxiter=maxiter)
            H[:, c] = out.x
            its.append(out.iterations)
        elif solver == "direct":
            H[:, c] = spsolve(A.tocsc(), b)
            its.append(0)
        else:
            raise ValueError(f"unknown solver {solver!r}")
        res.append(float(np.linalg.norm(A @ H[:, c] - b) / np.linalg.norm(b)))
    return LondonField(grid, H, curve, tuple(res), tuple(its))


def green_function(r):
    """Free-space kernel of ``(-Delta + I)^{-1}`` in three dimensions."""
    r = np.asarray(r, dtype=float)
    return np.exp(-r) / (4 * np.pi * r)


def green_superposition(curve: FilamentCurve, point, refine: int = 1) -> np.ndarray:
    """``2 pi sum G(|x - X|) ell ds`` by midpoint quadrature.

    Segments closer to ``point`` than their own length are subdivided until
    the distance dominates the sub-segment length.
    """
    x = np.asarray(point, float)
    seg_len = curve.spacing()
    dist = np.linalg.norm(curve.nodes - x, axis=1).min()
    if dist <= 1e-12:
        raise FilamentGeometryError("evaluation point lies on the filament")
    max_len = seg_len.max() / max(1, refine)
    if dist < seg_len.max():
        log.warning("evaluation point within one segment length of the filament; subdividing")
        max_len = min(max_len, dist / 8)
    mids, ds, tang = _subdivide(curve, max_len)
    r = np.linalg.norm(mids - x, axis=1)
    return 2 * np.pi * ((green_function(r) * ds)[:, None] * tang).sum(axis=0)
