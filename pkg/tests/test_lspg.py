import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmrom.autoencoder import decode, init_autoencoder
from nmrom.errors import DimensionError, NumericalError, RomFailureError, SingularSystemError
from nmrom.fom import FomConfig, GridSpec, be_residual, initial_state, run_fom
from nmrom.lspg import (
    FullResidual,
    GaussNewtonConfig,
    NonlinearDecoder,
    gauss_newton,
    lstsq_step,
    nm_residual,
    nm_residual_jacobian,
    rom_trajectory_from_snapshots,
    rom_trajectory_to_snapshots,
    run_ls_lspg,
    run_nm_lspg,
    solve,
)
from nmrom.snapshots import from_bytes, to_bytes


def small_model(grid, n_s=3, seed=0, scale=0.05):
    m = init_autoencoder(grid.n_state, n_s, 16, 5 * grid.n_state, 10, seed)
    m.dec_w2 *= scale
    return m


# -- Gauss-Newton -------------------------------------------------------------


@given(st.integers(1, 8), st.integers(0, 12), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_affine_consistent_one_iteration(n, extra, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n + extra, n))
    z_true = rng.standard_normal(n)
    b = a @ z_true
    out = gauss_newton(lambda z: a @ z - b, lambda z: a, np.zeros(n), GaussNewtonConfig(abs_tol=1e-10, max_step=None))
    assert out.iterations == 1 and out.converged
    assert np.linalg.norm(a @ out.z - b) <= 1e-10


@given(st.integers(1, 6), st.integers(1, 10), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_affine_least_squares_one_iteration(n, extra, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n + extra, n))
    b = rng.standard_normal(n + extra)
    out = gauss_newton(lambda z: a @ z - b, lambda z: a, np.zeros(n), GaussNewtonConfig(max_step=None))
    expected = np.linalg.lstsq(a, b, rcond=None)[0]
    assert out.iterations == 1 and out.reason == "step_tol"
    # the normal-equation residual vanishes at the least-squares solution
    assert np.linalg.norm(a.T @ (a @ out.z - b)) <= 1e-10
    np.testing.assert_allclose(out.z, expected, atol=1e-9)


def test_scalar_identity():
    out = gauss_newton(lambda z: z, lambda z: np.eye(1), np.array([1.0]))
    assert out.iterations == 1 and out.z[0] == 0.0


def test_rosenbrock():
    res = lambda z: np.array([1 - z[0], 10 * (z[1] - z[0] ** 2)])
    jac = lambda z: np.array([[-1.0, 0.0], [-20 * z[0], 10.0]])
    out = gauss_newton(res, jac, np.array([-1.2, 1.0]), GaussNewtonConfig(max_iter=50))
    assert out.converged and out.iterations <= 50
    np.testing.assert_allclose(out.z, [1.0, 1.0], atol=1e-8)
    assert out.residual_norm <= 1e-8


def test_rank_deficient_raises():
    a = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    with pytest.raises(SingularSystemError):
        lstsq_step(a, np.ones(3))
    with pytest.raises(SingularSystemError):
        gauss_newton(lambda z: a @ z - 1, lambda z: a, np.zeros(2))


def test_max_iter_returns_best_iterate():
    # r(z) = [z^2 + 1]: minimum norm 1 at z = 0, never below abs_tol
    res = lambda z: np.array([z[0] ** 2 + 1.0])
    jac = lambda z: np.array([[2 * z[0]]])
    out = gauss_newton(res, jac, np.array([3.0]), GaussNewtonConfig(max_iter=4, step_tol=1e-300))
    assert not out.converged and out.reason == "max_iter" and out.iterations == 4
    assert out.residual_norm == pytest.approx(res(out.z)[0])
    assert out.residual_norm < res(np.array([3.0]))[0]


def test_step_cap():
    out = solve(lambda z: (z - 100.0, np.eye(1)), np.zeros(1), GaussNewtonConfig(max_iter=1, max_step=10.0))
    assert out.z[0] == pytest.approx(10.0)


def test_non_finite_residual():
    with pytest.raises(NumericalError):
        solve(lambda z: (np.array([np.inf]), np.eye(1)), np.zeros(1), GaussNewtonConfig())


def test_gn_config_validation():
    with pytest.raises(ValueError):
        GaussNewtonConfig(abs_tol=0)
    with pytest.raises(ValueError):
        GaussNewtonConfig(max_iter=0)


# -- residuals ----------------------------------------------------------------


@pytest.fixture(scope="module")
def grid():
    return GridSpec(7, 6)


def test_zero_decoder_residual(grid):
    m = small_model(grid)
    for name in ("dec_w1", "dec_b1", "dec_w2", "dec_b2"):
        getattr(m, name)[...] = 0.0
    cfg = FomConfig(1.0, n_t=10)
    z = np.random.default_rng(0).standard_normal((2, 3))
    assert not np.any(nm_residual(z[0], z[1], m, grid, cfg, np.zeros(grid.n_state)))
    assert not np.any(nm_residual_jacobian(z[0], m, grid, cfg, np.zeros(grid.n_state)))


def test_residual_compositional_identity(grid):
    m = small_model(grid, scale=1.0)
    cfg = FomConfig(1.0, n_t=10)
    u_ref = initial_state(grid, 1.0)
    rng = np.random.default_rng(1)
    for _ in range(10):
        zn, zp = rng.standard_normal((2, 3))
        direct = nm_residual(zn, zp, m, grid, cfg, u_ref)
        via_fom = be_residual(u_ref + decode(m, zn), u_ref + decode(m, zp), grid, cfg)
        np.testing.assert_allclose(direct, via_fom, rtol=0, atol=1e-13)


def test_residual_jacobian_fd(grid):
    m = small_model(grid, scale=1.0, seed=3)
    cfg = FomConfig(1.0, n_t=10)
    u_ref = initial_state(grid, 1.0)
    rng = np.random.default_rng(2)
    zn, zp = rng.standard_normal((2, 3))
    jac = nm_residual_jacobian(zn, m, grid, cfg, u_ref)
    eps = 1e-6
    fd = np.column_stack([
        (nm_residual(zn + eps * e, zp, m, grid, cfg, u_ref) - nm_residual(zn - eps * e, zp, m, grid, cfg, u_ref))
        / (2 * eps) for e in np.eye(3)
    ])
    assert np.linalg.norm(jac - fd) / np.linalg.norm(fd) <= 1e-5


def test_residual_jacobian_vanishing_step(grid):
    m = small_model(grid, scale=1.0)
    cfg = FomConfig(1.0, t_final=1e-300, n_t=1)
    z = np.array([0.3, -0.2, 0.5])
    jac_g = NonlinearDecoder(m).value_and_jacobian(z)[1]
    np.testing.assert_array_equal(nm_residual_jacobian(z, m, grid, cfg, np.zeros(grid.n_state)), jac_g)


def test_full_residual_matches_reference(grid):
    m = small_model(grid, scale=1.0, seed=4)
    cfg = FomConfig(0.95, n_t=10)
    u_ref = initial_state(grid, 0.95)
    r = FullResidual(NonlinearDecoder(m), grid, cfg, u_ref)
    zn, zp = np.random.default_rng(5).standard_normal((2, 3))
    r.start_step(zp)
    res, jac = r(zn)
    np.testing.assert_allclose(res, nm_residual(zn, zp, m, grid, cfg, u_ref), atol=1e-13)
    np.testing.assert_allclose(jac, nm_residual_jacobian(zn, m, grid, cfg, u_ref), atol=1e-12)


def test_full_residual_dimension_check(grid):
    m = small_model(grid)
    with pytest.raises(DimensionError):
        FullResidual(NonlinearDecoder(m), grid, FomConfig(1.0), np.zeros(grid.n_state + 1))


# -- ROM runs -----------------------------------------------------------------


def test_identity_basis_reproduces_fom():
    g = GridSpec(8, 8)
    cfg = FomConfig(1.0, n_t=15)
    fom = run_fom(cfg, g)
    u_ref = initial_state(g, 1.0)
    rom = run_ls_lspg(np.eye(g.n_state), u_ref, g, cfg, GaussNewtonConfig(abs_tol=1e-12))
    np.testing.assert_allclose(rom.decoded_states(), fom.states, rtol=0, atol=1e-8)
    assert rom.method == "LS-LSPG" and rom.latent.shape == (16, g.n_state)


def test_trajectory_in_span_is_reproduced():
    g = GridSpec(8, 8)
    cfg = FomConfig(1.0, n_t=10)
    fom = run_fom(cfg, g)
    u_ref = initial_state(g, 1.0)
    phi = np.linalg.qr((fom.states - u_ref)[1:].T)[0]
    rom = run_ls_lspg(phi, u_ref, g, cfg, GaussNewtonConfig(abs_tol=1e-12))
    np.testing.assert_allclose(rom.decoded_states(), fom.states, atol=1e-8)


def test_zero_parameter_constant_latent():
    g = GridSpec(6, 6)
    m = small_model(g)
    for name in ("dec_w2", "dec_b2"):
        getattr(m, name)[...] = 0.0
    rom = run_nm_lspg(m, g, FomConfig(0.0, n_t=5))
    assert np.all(rom.latent == rom.latent[0])
    assert rom.gn_iterations == [0] * 5


def test_nm_lspg_deterministic_and_timed():
    g = GridSpec(6, 6)
    m = small_model(g, seed=2)
    cfg = FomConfig(1.0, n_t=6)
    a, b = run_nm_lspg(m, g, cfg), run_nm_lspg(m, g, cfg)
    np.testing.assert_array_equal(a.latent, b.latent)
    assert a.latent.shape == (7, 3)
    assert len(a.gn_iterations) == 6
    assert a.wall_clock_seconds > 0
    assert a.method == "NM-LSPG"


def test_failure_is_reported_or_raised():
    g = GridSpec(6, 6)
    m = small_model(g, seed=2, scale=50.0)
    m.dec_b1[...] = 800.0  # overflow in the decoder makes the residual non-finite
    m.dec_w1[...] *= 1e3
    cfg = FomConfig(1.0, n_t=4)
    rom = run_nm_lspg(m, g, cfg)
    if rom.failed:
        assert "step" in rom.failure
        with pytest.raises(RomFailureError):
            run_nm_lspg(m, g, cfg, strict=True)
    strict_cfg = GaussNewtonConfig(max_iter=1, abs_tol=1e-300, step_tol=1e-300)
    with pytest.raises(RomFailureError) as info:
        run_nm_lspg(small_model(g, seed=2), g, cfg, strict_cfg, strict=True)
    assert info.value.step == 1


def test_trajectory_file_round_trip():
    g = GridSpec(6, 6)
    m = small_model(g, seed=1)
    rom = run_nm_lspg(m, g, FomConfig(1.0, n_t=4))
    back = rom_trajectory_from_snapshots(from_bytes(to_bytes(rom_trajectory_to_snapshots(rom))), rom.decoder)
    assert back.latent.tobytes() == rom.latent.tobytes()
    assert back.u_ref.tobytes() == rom.u_ref.tobytes()
    assert back.gn_iterations == rom.gn_iterations and back.method == rom.method
    np.testing.assert_array_equal(back.decoded_states(), rom.decoded_states())
