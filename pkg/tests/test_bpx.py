import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vortexhybrid.bpx import (
    ResourceError,
    SolverError,
    bpx_apply,
    build_bpx,
    bpx_extremal_eigenvalues,
    extremal_eigenvalues,
    level_weights,
    pcg,
    poincare_constant,
    preconditioned_operator,
    prolongation,
    spectral_report,
)
from vortexhybrid.grid2d import Scaling, dyadic_laplacian, laplacian_eigenvalues


def test_prolongation_reproduces_coarse_hats():
    # a tent vanishing at both ends is piecewise linear on the coarse mesh
    P = prolongation(1, 2, 4)
    xc = np.arange(1, 4) / 4
    xf = np.arange(1, 16) / 16
    assert np.allclose(P @ np.minimum(xc, 1 - xc), np.minimum(xf, 1 - xf))
    P2 = prolongation(2, 2, 3)
    assert P2.shape == (49, 9)


def test_level_weights_standard_and_invalid():
    w = level_weights(3, 4)
    assert w[1] == pytest.approx(2.0) and w[4] == pytest.approx(16.0)
    assert all(v == 1.0 for v in level_weights(2, 5).values())
    with pytest.raises(ValueError):
        level_weights(2, 3, "bogus")


def test_single_node_level_one():
    bpx = build_bpx(2, 1)
    assert bpx.assembled().shape == (1, 1)
    op = preconditioned_operator(dyadic_laplacian(2, 1), bpx)
    assert op.lam_min == op.lam_max > 0


@pytest.mark.parametrize("dim,level", [(2, 3), (2, 4), (3, 2)])
def test_factorization_and_symmetry(dim, level):
    bpx = build_bpx(dim, level)
    B = bpx.assembled()
    assert np.allclose(B, B.T, atol=0)
    S = bpx.S
    assert np.linalg.norm(S @ S.T - B) <= 1e-12 * np.linalg.norm(B)
    op = preconditioned_operator(dyadic_laplacian(dim, level), bpx)
    KS = op.matrix
    assert np.linalg.norm(KS - KS.T) <= 1e-12 * np.linalg.norm(KS)
    assert op.lam_min > 0


def test_apply_matches_assembled_and_is_linear():
    bpx = build_bpx(2, 4)
    rng = np.random.default_rng(3)
    u, v = rng.standard_normal((2, bpx.num_nodes))
    assert np.allclose(bpx_apply(bpx, u), bpx.assembled() @ u, rtol=0, atol=1e-12 * np.abs(bpx.assembled() @ u).max())
    assert np.allclose(bpx.apply(u + v), bpx.apply(u) + bpx.apply(v), atol=1e-13)
    assert np.all(bpx.apply(np.zeros(bpx.num_nodes)) == 0)
    with pytest.raises(ValueError):
        bpx.apply(np.ones(3))


def test_2d_condition_mesh_uniform():
    conds = [row["cond"] for row in spectral_report(2, [3, 4, 5, 6])]
    assert max(conds) / min(conds) <= 1.5


def test_unpreconditioned_condition_grows_like_h_minus_two():
    levels = np.array([3, 4, 5, 6])
    conds = []
    for lev in levels:
        lam = laplacian_eigenvalues(2, int(lev), Scaling.STIFFNESS)
        conds.append(lam[-1] / lam[0])
    slope = np.polyfit(levels * np.log(2), np.log(conds), 1)[0]
    assert slope == pytest.approx(2.0, abs=0.2)


def test_level_four_spectrum_within_level_three_bounds():
    lo3, hi3 = extremal_eigenvalues(preconditioned_operator(dyadic_laplacian(2, 3), build_bpx(2, 3)).matrix)
    op4 = preconditioned_operator(dyadic_laplacian(2, 4), build_bpx(2, 4))
    lam = np.linalg.eigvalsh(op4.matrix)
    assert lam.min() >= 0.5 * lo3 and lam.max() <= 2 * hi3


def test_perturbed_weights_lose_mesh_uniformity():
    """Negative control: damping coarse levels must break the level-independent bound."""
    good = [row["cond"] for row in spectral_report(2, [3, 4, 5])]
    bad = [row["cond"] for row in spectral_report(2, [3, 4, 5], weights="perturbed")]
    assert max(good) / min(good) <= 1.5
    assert max(bad) / min(bad) > 2.0


def test_lanczos_matches_dense_eigenvalues(monkeypatch):
    monkeypatch.setattr("vortexhybrid.bpx.DENSE_EIG_MAX_NODES", 0)
    op = preconditioned_operator(dyadic_laplacian(2, 5), build_bpx(2, 5))
    lam = np.linalg.eigvalsh(op.matrix)
    assert op.matrix.shape[0] > 900
    # the smallest eigenvalue is double with antisymmetric eigenvectors
    assert lam[1] - lam[0] < 1e-8 * lam[0]
    assert op.lam_min == pytest.approx(lam[0], rel=1e-8)
    assert op.lam_max == pytest.approx(lam[-1], rel=1e-8)


@pytest.mark.parametrize("dim,level", [(2, 5), (3, 3)])
def test_matrix_free_spectrum_matches_dense(dim, level):
    bpx = build_bpx(dim, level)
    K = dyadic_laplacian(dim, level, Scaling.STIFFNESS)
    for shift in (0.0, bpx.h**dim):
        dense = preconditioned_operator(K, bpx, shift=shift)
        lam = np.linalg.eigvalsh(dense.matrix)
        lo, hi = bpx_extremal_eigenvalues(K, bpx, shift=shift)
        assert lo == pytest.approx(lam[0], rel=1e-8)
        assert hi == pytest.approx(lam[-1], rel=1e-8)


def test_shifted_operator_bounds_3d():
    rows = spectral_report(3, [2, 3])
    for r in rows:
        assert r["shifted_lam_min"] >= r["lam_min"]
        assert r["shifted_lam_max"] <= (1 + r["poincare"]) * r["lam_max"]


def test_poincare_constant_stable_3d():
    cp = [poincare_constant(3, lev) for lev in (3, 4, 5)]
    assert max(cp) / min(cp) <= 1.2
    # definition: smallest C with h^d |v|^2 <= C v^T K v
    K = dyadic_laplacian(3, 3).toarray()
    lam = np.linalg.eigvalsh(K)[0]
    assert cp[0] == pytest.approx(2.0**-9 / lam, rel=1e-12)


def test_pcg_solves_and_counts_iterations():
    K = dyadic_laplacian(2, 6)
    b = np.random.default_rng(0).standard_normal(K.shape[0])
    plain = pcg(K, b, None, tol=1e-10, maxiter=2000)
    pre = pcg(K, b, build_bpx(2, 6).apply, tol=1e-10)
    assert np.linalg.norm(K @ pre.x - b) <= 1e-10 * np.linalg.norm(b) * 1.01
    assert pre.iterations < plain.iterations / 3
    assert np.allclose(pre.x, plain.x, atol=1e-8)


def test_pcg_zero_rhs_and_failure():
    K = dyadic_laplacian(2, 5)
    res = pcg(K, np.zeros(K.shape[0]))
    assert res.iterations == 0 and np.all(res.x == 0)
    with pytest.raises(SolverError) as info:
        pcg(K, np.ones(K.shape[0]), None, tol=1e-14, maxiter=3)
    assert len(info.value.residuals) == 4


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bpx_is_positive_definite_quadratic_form(seed):
    bpx = build_bpx(2, 3)
    v = np.random.default_rng(seed).standard_normal(bpx.num_nodes)
    assert v @ bpx.apply(v) > 0


def test_resource_limit():
    with pytest.raises(ResourceError):
        build_bpx(3, 7)
