import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vortexhybrid.grid2d import ComplexField2D, Grid2D
from vortexhybrid.metrics import build_mask, masked_relative_error
from vortexhybrid.nls_ref import (
    ConfigurationError,
    DetectionError,
    NLSParams,
    core_profile,
    discrete_energy,
    evolve_nls,
    initial_data,
    linear_substep,
    locate_vortices,
    nonlinear_substep,
    strang_step,
    write_manifest,
)


def test_dt_budget_enforced():
    h = 2.0**-5
    NLSParams(eps=0.2, level=5, dt=0.5 * h * h)
    with pytest.raises(ConfigurationError):
        NLSParams(eps=0.2, level=5, dt=0.6 * h * h)
    # with eps < h the eps^2 term is the binding one
    with pytest.raises(ConfigurationError):
        NLSParams(eps=0.01, level=5, dt=0.5 * h * h)
    p = NLSParams.with_default_dt(0.01, 6)
    assert p.dt == pytest.approx(0.5 * 0.01**2)


def test_core_profile():
    assert core_profile(0.0) == 0.0
    assert 1 - core_profile(10.0) == pytest.approx(2 * np.exp(-np.sqrt(2) * 10), rel=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(1e-4, 1.0), st.floats(0.05, 1.0))
def test_nonlinear_substep_identity_on_unit_modulus(theta, tau, eps):
    u = np.exp(1j * theta) * np.ones(5)
    assert np.allclose(nonlinear_substep(u, tau, eps), u, atol=1e-15)


def test_nonlinear_half_step_phase():
    dt = 1e-3
    u = np.sqrt(0.5) * np.exp(0.3j) * np.ones(4)
    v = nonlinear_substep(u, 0.5 * dt, 1.0)
    assert np.allclose(v, u * np.exp(-0.25j * dt), atol=1e-15)
    assert np.allclose(np.abs(v), np.abs(u))


def test_crank_nicolson_unitary_with_zero_boundary():
    g = Grid2D(5)
    rng = np.random.default_rng(0)
    u = rng.standard_normal(g.num_nodes) + 1j * rng.standard_normal(g.num_nodes)
    v = linear_substep(u, np.zeros(g.num_boundary), g, 1e-3)
    assert abs(np.linalg.norm(v) - np.linalg.norm(u)) <= 1e-10 * np.linalg.norm(u)


def test_crank_nicolson_keeps_discrete_harmonic_steady():
    """A discrete harmonic field with matching boundary data is a steady state."""
    g = Grid2D(4)
    xy = g.coords()
    bxy = g.boundary_coords()
    u = np.exp(1j * 0.0) * (xy[:, 0] + 2j * xy[:, 1])
    bnd = bxy[:, 0] + 2j * bxy[:, 1]
    assert np.allclose(linear_substep(u, bnd, g, 1e-3), u, atol=1e-13)


def test_initial_data_zeros_far_field_and_boundary():
    eps = 0.02
    pos = ((0.375, 0.5), (0.625, 0.5))
    p = NLSParams.with_default_dt(eps, 5, positions=pos)
    u = initial_data(p)
    g = p.grid
    for a in pos:
        k = g.flat_index(int(round(a[0] / g.h)) - 1, int(round(a[1] / g.h)) - 1)
        assert abs(u.values[k]) <= 1e-8
    d = np.linalg.norm(g.coords()[:, None, :] - np.array(pos)[None], axis=-1).min(axis=1)
    far = d >= 10 * eps
    deficit = 1 - np.tanh(10 / np.sqrt(2))
    assert np.max(np.abs(np.abs(u.values[far]) - 1)) <= 2 * deficit
    assert np.allclose(np.abs(u.boundary), 1.0)


def test_initial_data_boundary_trace_matches_datum():
    from vortexhybrid.harmonic import default_boundary_phase

    mism = []
    for level in (5, 6, 7):
        p = NLSParams.with_default_dt(0.05, level)
        u = initial_data(p)
        assert np.array_equal(u.boundary, np.exp(1j * default_boundary_phase(p.grid).phi))
        # the phase just inside the bottom edge approaches the boundary phase at O(h)
        lat = u.lattice()
        mism.append(np.max(np.abs(np.angle(lat[1, 1:-1] * np.conj(lat[0, 1:-1])))))
    assert mism[0] / mism[1] == pytest.approx(2.0, abs=0.3)
    assert mism[1] / mism[2] == pytest.approx(2.0, abs=0.3)


def test_initial_data_rejects_boundary_vortex():
    with pytest.raises(ConfigurationError):
        initial_data(NLSParams.with_default_dt(0.1, 4, positions=((0.05, 0.5), (0.5, 0.5))))


def test_locate_recovers_initial_positions():
    p = NLSParams.with_default_dt(0.05, 6)
    found = locate_vortices(initial_data(p), 2).positions
    ref = np.array(p.positions)
    order = np.argsort(found[:, 0])
    assert np.max(np.linalg.norm(found[order] - ref, axis=1)) <= p.grid.h


def test_locate_without_vortices_raises():
    g = Grid2D(4)
    with pytest.raises(DetectionError):
        locate_vortices(ComplexField2D(g, np.ones(g.num_nodes, complex), np.ones(g.num_boundary, complex)), 1)


def test_centered_vortex_stays_at_center():
    p = NLSParams.with_default_dt(0.5, 5, T=0.01, boundary="centered-deg1", positions=((0.5, 0.5),))
    run = evolve_nls(p)
    g = p.grid
    for snap in run.snapshots:
        k = int(np.argmin(np.abs(snap.values)))
        assert np.linalg.norm(g.coords()[k] - 0.5) <= 2 * g.h
    a = locate_vortices(run.final, 1).positions[0]
    assert np.linalg.norm(a - 0.5) <= 2 * g.h


def test_locate_ignores_minima_without_winding():
    g = Grid2D(5)
    xy = g.coords()
    r = np.linalg.norm(xy - 0.5, axis=1)
    # a winding-free dip next to a genuine vortex
    dip = 1 - 0.8 * np.exp(-(np.linalg.norm(xy - [0.25, 0.25], axis=1) / 0.05) ** 2)
    u = np.tanh(r / 0.05) * np.exp(1j * np.arctan2(xy[:, 1] - 0.5, xy[:, 0] - 0.5)) * dip
    field = ComplexField2D(g, u, np.ones(g.num_boundary, complex))
    assert np.allclose(locate_vortices(field, 1).positions, [[0.5, 0.5]], atol=g.h)
    with pytest.raises(DetectionError):
        locate_vortices(field, 2)


def test_strang_step_preserves_boundary_and_shape():
    p = NLSParams.with_default_dt(0.1, 4)
    u0 = initial_data(p)
    u1 = strang_step(u0, p)
    assert u1.values.shape == u0.values.shape
    assert np.array_equal(u1.boundary, u0.boundary)


def test_energy_nearly_conserved():
    p = NLSParams.with_default_dt(0.1, 5, T=0.01)
    run = evolve_nls(p, snapshot_times=np.linspace(0, 0.01, 5))
    e = np.array(run.energies)
    assert len(e) == 5
    assert np.max(np.abs(e - e[0])) <= 1e-4 * e[0]


def test_dt_halving_second_order():
    eps, level, T = 0.2, 5, 0.01
    h = 2.0**-level
    # at the full budget step the stiffest Crank-Nicolson modes have
    # lambda dt ~ 4 and the first halving ratio is only ~2; half the budget
    # is inside the asymptotic range where Strang splitting is second order
    dt0 = 0.25 * min(h * h, eps**2)
    finals = []
    for k in range(3):
        p = NLSParams(eps=eps, level=level, dt=dt0 / 2**k, T=T)
        finals.append(evolve_nls(p, snapshot_times=[T]).final)
    mask = build_mask(np.array(p.positions), 0.1, p.grid)
    d1 = masked_relative_error(finals[1], finals[0], mask)
    d2 = masked_relative_error(finals[2], finals[1], mask)
    assert d1 / d2 >= 3


def test_spatial_self_convergence_small_scale():
    """Reduced-cost self-convergence: coarse difference at most 4x the fine one."""
    eps, T, levels = 0.1, 0.01, (5, 6, 7)
    dt = 0.5 * (2.0 ** -levels[-1]) ** 2
    finals = {L: evolve_nls(NLSParams(eps=eps, level=L, dt=dt, T=T), snapshot_times=[T]).final
              for L in levels}

    def restrict(u, level):
        step = 2 ** (level - levels[0])
        return u.lattice()[::step, ::step][1:-1, 1:-1].ravel()

    mask = build_mask(np.array(NLSParams(eps=eps, level=5, dt=dt).positions), 0.1, Grid2D(levels[0]))
    d_coarse = masked_relative_error(restrict(finals[6], 6), restrict(finals[5], 5), mask)
    d_fine = masked_relative_error(restrict(finals[7], 7), restrict(finals[6], 6), mask)
    assert d_coarse <= 4 * d_fine


def test_manifest(tmp_path):
    p = NLSParams.with_default_dt(0.2, 4, T=0.002)
    run = evolve_nls(p)
    path = tmp_path / "m.json"
    write_manifest(path, run, {"seed": 1})
    data = json.loads(path.read_text())
    assert data["seed"] == 1
    assert data["params"]["eps"] == 0.2
    assert data["snapshot_times"][0] == 0.0
    assert data["snapshot_times"][-1] == pytest.approx(0.002)
    assert discrete_energy(run.final, p.eps) == pytest.approx(data["energies"][-1])
