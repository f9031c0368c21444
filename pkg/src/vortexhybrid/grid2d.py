"""Uniform dyadic grids on the unit square and their five-point Laplacian.

Interior node ``(i, j)`` sits at ``((i+1) h, (j+1) h)`` and has flat index
``i + n*j`` with ``n = 2**level - 1``.  Reshaping a flat vector to ``(n, n)``
in C order therefore gives an array indexed ``[j, i]`` (row = y).

Boundary traces are ordered counterclockwise starting at ``(0, 0)``, corners
included once, for a total of ``4 * 2**level`` perimeter nodes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class Scaling(str, enum.Enum):
    STIFFNESS = "stiffness"
    FINITE_DIFFERENCE = "fd"


class GridDomainError(ValueError):
    """A sampling point lies too close to the boundary of the unit square."""


@dataclass(frozen=True)
class Grid2D:
    level: int

    def __post_init__(self):
        if int(self.level) != self.level or self.level < 1:
            raise ValueError(f"grid level must be an integer >= 1, got {self.level}")

    @property
    def h(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def n(self) -> int:
        """Interior nodes per side."""
        return 2**self.level - 1

    @property
    def num_nodes(self) -> int:
        return self.n * self.n

    @property
    def num_boundary(self) -> int:
        return 4 * 2**self.level

    def coords(self) -> np.ndarray:
        """Interior node coordinates, shape ``(N_h, 2)`` in flat-index order."""
        return _interior_coords(self.level)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """``(X, Y)`` arrays of shape ``(n, n)`` indexed ``[j, i]``."""
        t = self.h * np.arange(1, self.n + 1)
        return np.meshgrid(t, t, indexing="xy")

    def boundary_coords(self) -> np.ndarray:
        return _boundary_coords(self.level)

    def flat_index(self, i, j):
        return np.asarray(i) + self.n * np.asarray(j)

    def to_array(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values).reshape(self.n, self.n)

    def full_lattice(self, values: np.ndarray, boundary: np.ndarray) -> np.ndarray:
        """Embed interior values and a perimeter trace into the ``(N+1, N+1)``
        lattice including the boundary, indexed ``[J, I]``."""
        values = np.asarray(values)
        boundary = np.asarray(boundary)
        if boundary.shape[0] != self.num_boundary:
            raise ValueError("boundary trace has wrong length")
        N = 2**self.level
        out = np.empty((N + 1, N + 1), dtype=np.result_type(values, boundary))
        out[1:N, 1:N] = self.to_array(values)
        idx = _boundary_lattice(self.level)
        out[idx[:, 1], idx[:, 0]] = boundary
        # the perimeter walk closes at (0, 0) which is already filled
        return out


@lru_cache(maxsize=None)
def _interior_coords(level: int) -> np.ndarray:
    n = 2**level - 1
    h = 2.0 ** (-level)
    i = np.tile(np.arange(n), n)
    j = np.repeat(np.arange(n), n)
    out = np.column_stack([(i + 1) * h, (j + 1) * h])
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def _boundary_lattice(level: int) -> np.ndarray:
    """Integer lattice coordinates ``(I, J)`` of the perimeter nodes."""
    N = 2**level
    k = np.arange(N)
    bottom = np.column_stack([k, np.zeros_like(k)])
    right = np.column_stack([np.full_like(k, N), k])
    top = np.column_stack([N - k, np.full_like(k, N)])
    left = np.column_stack([np.zeros_like(k), N - k])
    out = np.vstack([bottom, right, top, left])
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def _boundary_coords(level: int) -> np.ndarray:
    out = _boundary_lattice(level) * 2.0 ** (-level)
    out.setflags(write=False)
    return out


def boundary_lattice(grid: Grid2D) -> np.ndarray:
    return _boundary_lattice(grid.level)


def _stencil_1d(n: int) -> sp.csr_matrix:
    return sp.diags([-np.ones(n - 1), 2.0 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


@lru_cache(maxsize=None)
def dyadic_laplacian(dim: int, level: int, scaling: Scaling = Scaling.STIFFNESS) -> sp.csr_matrix:
    """(2d, -1) stencil Laplacian on the interior of ``[0,1]^dim``.

    Stiffness scaling multiplies the stencil by ``h**(dim-2)`` (the finite
    element convention, so 2D entries are h-independent); finite-difference
    scaling multiplies by ``h**-2``.
    """
    scaling = Scaling(scaling)
    n = 2**level - 1
    h = 2.0 ** (-level)
    T = _stencil_1d(n)
    eye = sp.identity(n, format="csr")
    A = sp.csr_matrix((n**dim, n**dim))
    for axis in range(dim):
        factors = [T if k == axis else eye for k in range(dim)]
        term = factors[0]
        for f in factors[1:]:
            term = sp.kron(f, term, format="csr")
        A = A + term
    factor = h ** (dim - 2) if scaling is Scaling.STIFFNESS else h**-2
    A = (factor * A).tocsr()
    A.sort_indices()
    return A


def assemble_laplacian(grid: Grid2D, scaling: Scaling | str = Scaling.STIFFNESS) -> sp.csr_matrix:
    """Five-point Laplacian ``K`` with Dirichlet nodes eliminated (SPD)."""
    return dyadic_laplacian(2, grid.level, Scaling(scaling))


def laplacian_eigenvalues(dim: int, level: int, scaling: Scaling | str = Scaling.STIFFNESS) -> np.ndarray:
    """Closed-form spectrum of :func:`dyadic_laplacian`, sorted ascending."""
    scaling = Scaling(scaling)
    n = 2**level - 1
    h = 2.0 ** (-level)
    one_d = 4.0 * np.sin(np.arange(1, n + 1) * np.pi * h / 2) ** 2
    lam = one_d
    for _ in range(dim - 1):
        lam = np.add.outer(lam, one_d).ravel()
    factor = h ** (dim - 2) if scaling is Scaling.STIFFNESS else h**-2
    return np.sort(factor * lam)


@lru_cache(maxsize=None)
def _dirichlet_coupling(level: int) -> sp.csr_matrix:
    """Sparse ``N_h x perimeter`` incidence of interior nodes to boundary neighbours."""
    N = 2**level
    n = N - 1
    lattice = _boundary_lattice(level)
    lookup = -np.ones((N + 1, N + 1), dtype=int)
    lookup[lattice[:, 1], lattice[:, 0]] = np.arange(lattice.shape[0])
    rows, cols = [], []
    I, J = np.meshgrid(np.arange(1, N), np.arange(1, N), indexing="xy")
    flat = (I - 1) + n * (J - 1)
    for dI, dJ in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = lookup[J + dJ, I + dI]
        hit = nb >= 0
        rows.append(flat[hit])
        cols.append(nb[hit])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n * n, 4 * N))


def apply_dirichlet_rhs(grid: Grid2D, boundary: np.ndarray, scaling: Scaling | str = Scaling.STIFFNESS) -> np.ndarray:
    """Right-hand side ``b`` such that ``K u = b`` is the discrete Dirichlet problem.

    ``boundary`` holds the Dirichlet values at the perimeter nodes (real or
    complex).  Only interior nodes adjacent to the boundary get contributions.
    """
    boundary = np.asarray(boundary)
    if boundary.ndim != 1 or boundary.shape[0] != grid.num_boundary:
        raise ValueError(
            f"boundary array has length {boundary.shape}, expected {grid.num_boundary} perimeter nodes"
        )
    b = _dirichlet_coupling(grid.level) @ boundary
    if Scaling(scaling) is Scaling.FINITE_DIFFERENCE:
        b = b / grid.h**2
    return b


# -- interpolation stencils -------------------------------------------------

def _cell(grid: Grid2D, point, margin_nodes: int = 2):
    x, y = float(point[0]), float(point[1])
    h = grid.h
    lo = margin_nodes * h
    tol = 1e-12
    if not (lo - tol <= x <= 1 - lo + tol and lo - tol <= y <= 1 - lo + tol):
        raise GridDomainError(f"point ({x}, {y}) is closer than {margin_nodes}h to the boundary")
    N = 2**grid.level
    # lattice index of the lower-left corner, clipped so that every stencil
    # neighbour is an interior node
    I0 = int(np.clip(np.floor(x / h), margin_nodes, N - margin_nodes - 1))
    J0 = int(np.clip(np.floor(y / h), margin_nodes, N - margin_nodes - 1))
    tx = x / h - I0
    ty = y / h - J0
    return I0, J0, tx, ty


def interpolation_stencil(grid: Grid2D, point) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear point-interpolation weights as ``(flat indices, weights)``."""
    I0, J0, tx, ty = _cell(grid, point, margin_nodes=1)
    n = grid.n
    idx, w = [], []
    for dI, wx in ((0, 1 - tx), (1, tx)):
        for dJ, wy in ((0, 1 - ty), (1, ty)):
            idx.append((I0 + dI - 1) + n * (J0 + dJ - 1))
            w.append(wx * wy)
    return _merge(idx, w)


def gradient_stencil(grid: Grid2D, point) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Central differences at the four cell nodes, bilinearly interpolated.

    Returns ``(idx, wx, wy)`` with ``d/dx f(point) ~= wx @ f[idx]``.
    """
    I0, J0, tx, ty = _cell(grid, point, margin_nodes=2)
    n = grid.n
    inv = 1.0 / (2 * grid.h)
    idx, cx, cy = [], [], []
    for dI, bx in ((0, 1 - tx), (1, tx)):
        for dJ, by in ((0, 1 - ty), (1, ty)):
            I, J = I0 + dI, J0 + dJ
            w = bx * by * inv
            for (sI, sJ, gx, gy) in ((1, 0, w, 0.0), (-1, 0, -w, 0.0), (0, 1, 0.0, w), (0, -1, 0.0, -w)):
                idx.append((I + sI - 1) + n * (J + sJ - 1))
                cx.append(gx)
                cy.append(gy)
    idx = np.asarray(idx)
    uniq, inverse = np.unique(idx, return_inverse=True)
    wx = np.zeros(uniq.size)
    wy = np.zeros(uniq.size)
    np.add.at(wx, inverse, cx)
    np.add.at(wy, inverse, cy)
    return uniq, wx, wy


def _merge(idx, w):
    idx = np.asarray(idx)
    uniq, inverse = np.unique(idx, return_inverse=True)
    out = np.zeros(uniq.size)
    np.add.at(out, inverse, w)
    return uniq, out


def sample(grid: Grid2D, values: np.ndarray, point):
    idx, w = interpolation_stencil(grid, point)
    return w @ np.asarray(values)[idx]


def sample_gradient(grid: Grid2D, values: np.ndarray, point) -> np.ndarray:
    """Gradient of a grid field at ``point`` (at least 2h from the boundary)."""
    idx, wx, wy = gradient_stencil(grid, point)
    v = np.asarray(values)[idx]
    return np.array([wx @ v, wy @ v])


# -- complex field container and dump format ---------------------------------

@dataclass(frozen=True)
class ComplexField2D:
    grid: Grid2D
    values: np.ndarray
    boundary: np.ndarray | None = field(default=None)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.shape != (self.grid.num_nodes,):
            raise ValueError(f"field has {vals.shape} values, expected ({self.grid.num_nodes},)")
        object.__setattr__(self, "values", vals)
        if self.boundary is not None:
            bnd = np.asarray(self.boundary, dtype=complex)
            if bnd.shape != (self.grid.num_boundary,):
                raise ValueError("boundary trace length must equal 4 * 2**level")
            object.__setattr__(self, "boundary", bnd)

    def as_array(self) -> np.ndarray:
        return self.grid.to_array(self.values)

    def lattice(self) -> np.ndarray:
        if self.boundary is None:
            raise ValueError("field has no boundary trace")
        return self.grid.full_lattice(self.values, self.boundary)


def write_field(path, grid: Grid2D, values, kind: str = "field", fmt: str = "text") -> None:
    """Dump an interior field as ``x y re im`` rows (17 significant digits).

    ``fmt="text"`` writes a ``# level kind`` header and whitespace-separated
    columns; ``fmt="csv"`` writes a CSV header row instead.
    """
    values = np.asarray(values)
    xy = grid.coords()
    data = np.column_stack([xy, np.real(values), np.imag(values) if np.iscomplexobj(values) else np.zeros(values.shape)])
    path = Path(path)
    if fmt == "csv":
        header = "x,y,re,im"
        np.savetxt(path, data, fmt="%.17g", delimiter=",", header=header, comments="")
    elif fmt == "text":
        np.savetxt(path, data, fmt="%.17g", header=f"level {grid.level} kind {kind}")
    else:
        raise ValueError(f"unknown field format {fmt!r}")


def read_field(path) -> tuple[Grid2D, np.ndarray, str]:
    path = Path(path)
    with path.open() as fh:
        first = fh.readline().strip()
    if first.startswith("#"):
        tokens = first.lstrip("#").split()
        level = int(tokens[tokens.index("level") + 1])
        kind = tokens[tokens.index("kind") + 1] if "kind" in tokens else "field"
        data = np.loadtxt(path, ndmin=2)
    else:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n = int(round(np.sqrt(data.shape[0])))
        level = int(round(np.log2(n + 1)))
        kind = "field"
    grid = Grid2D(level)
    if data.shape[0] != grid.num_nodes:
        raise ValueError("field dump row count does not match its grid level")
    return grid, data[:, 2] + 1j * data[:, 3], kind
