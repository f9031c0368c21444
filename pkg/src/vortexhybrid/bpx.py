"""Multilevel BPX preconditioner on dyadic grids in 2D and 3D.

``B = sum_l c_l P_l P_l^T`` where ``P_l`` is tensor-product linear
interpolation from the level-``l`` grid to the finest one and
``c_l = h_l**(2-d)``.  ``B`` is paired with the stiffness-scaled Laplacian
(``h**(d-2)`` times the stencil), under which its condition number is
level-uniform.  ``S`` is the dense Cholesky factor of the assembled ``B``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid2d import Scaling, dyadic_laplacian, laplacian_eigenvalues

log = logging.getLogger(__name__)

MAX_NODES = 200_000
DENSE_EIG_MAX_NODES = 1100


class ResourceError(RuntimeError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals or [])


@lru_cache(maxsize=None)
def _prolong_1d(level: int) -> sp.csr_matrix:
    """Linear interpolation from ``level`` to ``level + 1`` (interior nodes)."""
    nc = 2**level - 1
    nf = 2 ** (level + 1) - 1
    rows, cols, vals = [], [], []
    for i in range(nc):
        f = 2 * i + 1
        rows += [f - 1, f, f + 1]
        cols += [i, i, i]
        vals += [0.5, 1.0, 0.5]
    return sp.csr_matrix((vals, (rows, cols)), shape=(nf, nc))


@lru_cache(maxsize=None)
def prolongation_1d(coarse: int, fine: int) -> sp.csr_matrix:
    P = sp.identity(2**fine - 1, format="csr")
    for lev in range(fine - 1, coarse - 1, -1):
        P = P @ _prolong_1d(lev)
    return P.tocsr()


def prolongation(dim: int, coarse: int, fine: int) -> sp.csr_matrix:
    """Tensor-product interpolation ``P_l`` from level ``coarse`` to ``fine``."""
    P1 = prolongation_1d(coarse, fine)
    P = P1
    for _ in range(dim - 1):
        P = sp.kron(P1, P, format="csr")
    return P


def level_weights(dim: int, fine: int, kind: str = "standard") -> dict[int, float]:
    """``c_l = h_l**(2-d)``; ``kind="perturbed"`` is a deliberate misconfiguration
    (coarse levels damped by ``4**-(L-l)``) used as a negative control."""
    weights = {}
    for lev in range(1, fine + 1):
        c = (2.0 ** (-lev)) ** (2 - dim)
        if kind == "perturbed":
            c *= 4.0 ** (-(fine - lev))
        elif kind != "standard":
            raise ValueError(f"unknown BPX weight kind {kind!r}")
        weights[lev] = c
    return weights


@dataclass
class BPXPreconditioner:
    dim: int
    level: int
    weights: dict[int, float]
    prolongations: dict[int, sp.csr_matrix]
    _B: np.ndarray | None = field(default=None, repr=False)
    _S: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_nodes(self) -> int:
        return (2**self.level - 1) ** self.dim

    @property
    def h(self) -> float:
        return 2.0 ** (-self.level)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return bpx_apply(self, v)

    def assembled(self) -> np.ndarray:
        """Dense ``B`` (desk scale only)."""
        if self._B is None:
            n = self.num_nodes
            B = np.zeros((n, n))
            for lev, P in self.prolongations.items():
                B += self.weights[lev] * (P @ P.T).toarray()
            self._B = B
        return self._B

    @property
    def S(self) -> np.ndarray:
        """Lower-triangular ``S`` with ``B = S S^T``."""
        if self._S is None:
            self._S = sla.cholesky(self.assembled(), lower=True)
        return self._S

    def as_operator(self) -> spla.LinearOperator:
        n = self.num_nodes
        return spla.LinearOperator((n, n), matvec=self.apply, dtype=float)


def build_bpx(dim: int, level: int, weights: str = "standard") -> BPXPreconditioner:
    """BPX preconditioner for the stiffness-scaled Laplacian on a dyadic grid."""
    if dim not in (2, 3):
        raise ValueError("BPX is provided for dimension 2 or 3")
    if level < 1:
        raise ValueError("level must be >= 1")
    n = (2**level - 1) ** dim
    if n > MAX_NODES:
        raise ResourceError(f"{n} nodes exceeds the desk-scale limit of {MAX_NODES}")
    w = level_weights(dim, level, weights)
    Ps = {lev: prolongation(dim, lev, level) for lev in range(1, level + 1)}
    return BPXPreconditioner(dim=dim, level=level, weights=w, prolongations=Ps)


def bpx_apply(bpx: BPXPreconditioner, v: np.ndarray) -> np.ndarray:
    """Matrix-free ``B v`` via the multilevel sum."""
    v = np.asarray(v)
    if v.shape[0] != bpx.num_nodes:
        raise ValueError(f"vector length {v.shape[0]} != {bpx.num_nodes}")
    out = np.zeros_like(v, dtype=np.result_type(v, float))
    for lev, P in bpx.prolongations.items():
        out += bpx.weights[lev] * (P @ (P.T @ v))
    return out


# -- preconditioned operators -------------------------------------------------

@dataclass
class PreconditionedOperator:
    matrix: np.ndarray
    shift: float
    level: int
    dim: int
    lam_min: float
    lam_max: float

    @property
    def cond(self) -> float:
        return self.lam_max / self.lam_min


def extremal_eigenvalues(A: np.ndarray) -> tuple[float, float]:
    n = A.shape[0]
    if n <= DENSE_EIG_MAX_NODES:
        lam = sla.eigvalsh(A)
        return float(lam[0]), float(lam[-1])
    # a seeded random start vector: symmetric ones miss antisymmetric eigenvectors
    v0 = np.random.default_rng(0).standard_normal(n)
    lmax = spla.eigsh(A, k=1, which="LA", return_eigenvectors=False, tol=1e-9, v0=v0, ncv=60)[0]
    lmin = spla.eigsh(A, k=1, which="SA", return_eigenvectors=False, tol=1e-9, v0=v0, ncv=60)[0]
    return float(lmin), float(lmax)


def preconditioned_operator(K: sp.spmatrix, bpx: BPXPreconditioner, shift: float | None = None,
                            base: PreconditionedOperator | None = None) -> PreconditionedOperator:
    """``K_S = S^T K S`` or, with ``shift``, ``S^T (K + shift I) S``.

    ``base`` may pass an already formed unshifted ``K_S`` to reuse.
    """
    if K.shape[0] != bpx.num_nodes:
        raise ValueError("operator and preconditioner dimensions disagree")
    S = bpx.S
    if base is not None:
        KS = base.matrix
    else:
        KS = S.T @ (K @ S)
        KS = 0.5 * (KS + KS.T)
    if shift:
        StS = S.T @ S
        KS = KS + shift * 0.5 * (StS + StS.T)
    lo, hi = extremal_eigenvalues(KS)
    return PreconditionedOperator(KS, float(shift or 0.0), bpx.level, bpx.dim, lo, hi)


def bpx_extremal_eigenvalues(K: sp.spmatrix, bpx: BPXPreconditioner,
                             shift: float = 0.0) -> tuple[float, float]:
    """Extremal eigenvalues of ``S^T (K + shift I) S`` without forming ``S``.

    The matrix is similar to ``B Kt`` with ``Kt = K + shift I``, whose
    eigenpairs solve ``(Kt B Kt) x = lam Kt x``.  Lanczos on that pencil needs
    only the matrix-free BPX apply and a sparse factorization of ``Kt``.
    """
    n = bpx.num_nodes
    Kt = (K + shift * sp.identity(n, format="csc")).tocsc() if shift else sp.csc_matrix(K)
    lu = spla.splu(Kt)
    A = spla.LinearOperator((n, n), matvec=lambda x: Kt @ bpx.apply(Kt @ x), dtype=float)
    Minv = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
    v0 = np.random.default_rng(0).standard_normal(n)
    lmin, lmax = (spla.eigsh(A, k=1, M=Kt, Minv=Minv, which=which, return_eigenvectors=False,
                             tol=1e-10, v0=v0)[0] for which in ("SA", "LA"))
    return float(lmin), float(lmax)


def poincare_constant(dim: int, level: int) -> float:
    """Smallest ``C_P`` with ``h^d |v|^2 <= C_P v^T K v`` for the stiffness ``K``."""
    h = 2.0 ** (-level)
    lam_min = laplacian_eigenvalues(dim, level, Scaling.STIFFNESS)[0]
    return h**dim / lam_min


def spectral_report(dim: int, levels, weights: str = "standard") -> list[dict]:
    """Extremal eigenvalues of ``K_S`` and the shifted ``K~_S`` per level."""
    rows = []
    for lev in levels:
        bpx = build_bpx(dim, lev, weights)
        K = dyadic_laplacian(dim, lev, Scaling.STIFFNESS)
        if bpx.num_nodes <= DENSE_EIG_MAX_NODES:
            plain = preconditioned_operator(K, bpx)
            shifted = preconditioned_operator(K, bpx, shift=bpx.h**dim, base=plain)
            lo, hi = plain.lam_min, plain.lam_max
            slo, shi = shifted.lam_min, shifted.lam_max
        else:
            lo, hi = bpx_extremal_eigenvalues(K, bpx)
            slo, shi = bpx_extremal_eigenvalues(K, bpx, shift=bpx.h**dim)
        rows.append({
            "dim": dim,
            "level": lev,
            "lam_min": lo,
            "lam_max": hi,
            "cond": hi / lo,
            "shifted_lam_min": slo,
            "shifted_lam_max": shi,
            "shifted_cond": shi / slo,
            "poincare": poincare_constant(dim, lev),
        })
    return rows


# -- conjugate gradients --------------------------------------------------------

@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residuals: list[float]

    @property
    def residual(self) -> float:
        return self.residuals[-1]


def pcg(A, b: np.ndarray, precond=None, tol: float = 1e-10, maxiter: int = 1000, x0=None) -> CGResult:
    """Preconditioned conjugate gradients on relative residual ``|r|/|b|``.

    ``A`` and ``precond`` may be matrices or callables.  Raises
    :class:`SolverError` with the residual history if ``maxiter`` is hit.
    """
    matvec = A if callable(A) else (lambda v: A @ v)
    prec = precond if callable(precond) or precond is None else (lambda v: precond @ v)
    if prec is None:
        prec = lambda v: v  # noqa: E731
    b = np.asarray(b)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b, dtype=np.result_type(b, float)) if x0 is None else np.array(x0, dtype=np.result_type(b, float))
    if bnorm == 0.0:
        return CGResult(np.zeros_like(x), 0, [0.0])
    r = b - matvec(x)
    hist = [np.linalg.norm(r) / bnorm]
    if hist[-1] <= tol:
        return CGResult(x, 0, hist)
    z = prec(r)
    p = z.copy()
    rz = np.vdot(r, z)
    for it in range(1, maxiter + 1):
        Ap = matvec(p)
        alpha = rz / np.vdot(p, Ap)
        x = x + alpha * p
        r = r - alpha * Ap
        hist.append(np.linalg.norm(r) / bnorm)
        if hist[-1] <= tol:
            return CGResult(x, it, hist)
        z = prec(r)
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"PCG did not reach {tol:g} in {maxiter} iterations (last {hist[-1]:.3e})", hist)
