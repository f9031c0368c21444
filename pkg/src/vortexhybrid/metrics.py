"""Masked, phase-aligned comparison of reconstructed fields against a reference."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid2d import Grid2D
from .vortex import VortexConfig


class DegenerateError(ValueError):
    pass


@dataclass(frozen=True)
class MaskRegion:
    grid: Grid2D
    centers: np.ndarray
    r_mask: float
    member: np.ndarray

    @property
    def area(self) -> float:
        return float(self.member.sum()) * self.grid.h**2

    @property
    def count(self) -> int:
        return int(self.member.sum())


def build_mask(config: VortexConfig | np.ndarray, r_mask: float, grid: Grid2D) -> MaskRegion:
    """Interior nodes at distance ``>= r_mask`` from every center."""
    if r_mask < 0:
        raise ValueError("r_mask must be non-negative")
    centers = config.positions if isinstance(config, VortexConfig) else np.asarray(config, float).reshape(-1, 2)
    pts = grid.coords()
    if len(centers):
        d = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=-1).min(axis=1)
        member = d >= r_mask
    else:
        member = np.ones(len(pts), dtype=bool)
    return MaskRegion(grid, np.array(centers), float(r_mask), member)


def _values(u) -> np.ndarray:
    return np.asarray(u.values if hasattr(u, "values") else u)


def align_phase(u_ref, u_approx, mask: MaskRegion) -> tuple[float, np.ndarray]:
    """Global phase ``alpha`` minimising the masked L2 distance, and ``e^{i alpha} u_approx``."""
    ref, app = _values(u_ref), _values(u_approx)
    if ref.shape != app.shape:
        raise ValueError("fields live on different grids")
    s = np.vdot(app[mask.member], ref[mask.member])
    if abs(s) == 0.0:
        raise DegenerateError("fields have zero masked overlap")
    alpha = float(np.angle(s))
    return alpha, np.exp(1j * alpha) * app


def masked_relative_error(u_ref, u_approx, mask: MaskRegion) -> float:
    """``|u_ref - aligned u_approx| / |u_ref|`` over the mask with ``h^2`` node weights."""
    if mask.count == 0:
        raise DegenerateError("mask is empty")
    ref = _values(u_ref)[mask.member]
    app = _values(u_approx)[mask.member]
    s = np.vdot(app, ref)
    if abs(s) > 0:
        app = app * (s / abs(s))
    w = mask.grid.h**2
    return float(np.sqrt(w * np.sum(np.abs(ref - app) ** 2)) / np.sqrt(w * np.sum(np.abs(ref) ** 2)))


def phase_mismatch(u_ref, u_approx, mask: MaskRegion) -> np.ndarray:
    """``Arg(u_ref conj(u_approx))`` in ``(-pi, pi]`` on masked nodes, NaN elsewhere."""
    ref, app = _values(u_ref), _values(u_approx)
    out = np.full(ref.shape, np.nan)
    d = np.angle(ref[mask.member] * np.conj(app[mask.member]))
    d[d == -np.pi] = np.pi
    out[mask.member] = d
    return out


@dataclass(frozen=True)
class SweepRow:
    eps: float
    E_M1: float
    E_M2: float
    level: int
    dt: float

    @property
    def ratio(self) -> float:
        return self.E_M2 / self.E_M1


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def write_sweep(path, rows: list[SweepRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps", "E_M1", "E_M2", "ratio", "level", "dt"])
        for r in rows:
            w.writerow([repr(float(r.eps)), repr(float(r.E_M1)), repr(float(r.E_M2)), repr(float(r.ratio)), int(r.level), repr(float(r.dt))])


def read_sweep(path) -> list[SweepRow]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return [SweepRow(float(r["eps"]), float(r["E_M1"]), float(r["E_M2"]), int(r["level"]), float(r["dt"]))
            for r in rows]
