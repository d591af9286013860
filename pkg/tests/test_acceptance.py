"""Acceptance suite, one test per criterion.

Criteria 1-8 are fast property checks. Criteria 9-13 train the desk-scale
autoencoder once per session (about half an hour on one core); set
``NMROM_DESK_DIR`` to keep and reuse its artifacts between sessions.
Criteria 14-15 run the 60x60 configuration and only execute with
``NMROM_FULL_SCALE=1``. The terminal summary prints one PASS/FAIL line per
criterion.
"""

import os

import numpy as np
import pytest

from nmrom.autoencoder import (
    PARAM_NAMES,
    decode,
    decode_with_jacobian,
    decoder_jacobian,
    from_bytes as model_from_bytes,
    init_autoencoder,
    loss_and_grads,
    nm_projection_error,
    to_bytes as model_to_bytes,
)
from nmrom.experiment import ExperimentConfig, Workbench
from nmrom.fom import FomConfig, GridSpec, be_jacobian, be_residual, initial_state, run_fom
from nmrom.hyper import build_plan, build_subnet, plan_from_bytes, plan_to_bytes, stencil_closure
from nmrom.hyper import run_ls_lspg_hr, run_nm_lspg_hr
from nmrom.lspg import GaussNewtonConfig, gauss_newton, run_ls_lspg, run_nm_lspg
from nmrom.pod import compute_basis, ls_projection_error
from nmrom.snapshots import SnapshotMatrix, from_bytes, to_bytes


def detail(request, text):
    request.node.user_properties.append(("detail", text))


def orthonormal(n, k, seed):
    return np.linalg.qr(np.random.default_rng(seed).standard_normal((n, k)))[0]


# -- property suite -----------------------------------------------------------


@pytest.mark.criterion(1)
def test_fom_jacobian_finite_differences(request):
    worst = 0.0
    for n in (4, 6):
        g = GridSpec(n, n)
        cfg = FomConfig(1.0, n_t=20, re=100.0)
        rng = np.random.default_rng(n)
        up = rng.standard_normal(g.n_state)
        for _ in range(20):
            u = rng.standard_normal(g.n_state)
            jac = be_jacobian(u, g, cfg).toarray()
            eps = 1e-6
            fd = np.column_stack([
                (be_residual(u + eps * e, up, g, cfg) - be_residual(u - eps * e, up, g, cfg)) / (2 * eps)
                for e in np.eye(g.n_state)
            ])
            worst = max(worst, np.linalg.norm(jac - fd) / np.linalg.norm(fd))
    detail(request, f"max relative error {worst:.2e} <= 1e-5")
    assert worst <= 1e-5


@pytest.mark.criterion(2)
def test_autoencoder_gradients(request):
    m = init_autoencoder(6, 2, 8, 8, 3, seed=2)
    rng = np.random.default_rng(7)
    for name in ("enc_b1", "enc_b2", "dec_b1", "dec_b2"):
        getattr(m, name)[:] = 0.3 * rng.standard_normal(getattr(m, name).shape)
    x = rng.standard_normal((3, 6))
    _, grads = loss_and_grads(m, x)
    worst, eps = 0.0, 1e-6
    for name in PARAM_NAMES:
        p = getattr(m, name)
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            lp = loss_and_grads(m, x)[0]
            p[idx] = old - eps
            lm = loss_and_grads(m, x)[0]
            p[idx] = old
            fd[idx] = (lp - lm) / (2 * eps)
        worst = max(worst, np.linalg.norm(grads[name] - fd) / np.linalg.norm(fd))
    detail(request, f"max relative error over {len(PARAM_NAMES)} tensors {worst:.2e} <= 1e-5")
    assert worst <= 1e-5


@pytest.mark.criterion(3)
def test_decoder_jacobian_and_sparsity(request):
    m = init_autoencoder(12, 3, 6, 20, 4, seed=3)
    rng = np.random.default_rng(0)
    worst, eps = 0.0, 1e-6
    for _ in range(5):
        z = rng.standard_normal(3)
        jac = decoder_jacobian(m, z)
        fd = np.column_stack([(decode(m, z + eps * e) - decode(m, z - eps * e)) / (2 * eps) for e in np.eye(3)])
        worst = max(worst, np.linalg.norm(jac - fd) / np.linalg.norm(fd))
    # single-input hidden units make each Jacobian entry's reachability explicit
    s = init_autoencoder(10, 3, 4, 12, 2, seed=5)
    s.dec_w1[...] = 0.0
    s.dec_w1[np.arange(12), np.arange(12) % 3] = 1.0
    reach = np.zeros((10, 3), dtype=bool)
    for i in range(10):
        for h in s.mask_cols[i]:
            reach[i] |= s.dec_w1[h] != 0
    same = np.array_equal(decoder_jacobian(s, np.array([0.2, -0.4, 0.7])) != 0, reach)
    detail(request, f"FD relative error {worst:.2e} <= 1e-6, sparsity equals reachability: {same}")
    assert worst <= 1e-6 and same


@pytest.mark.criterion(4)
def test_subnet_equivalence(request):
    g = GridSpec(12, 10)
    m = init_autoencoder(g.n_state, 4, 16, 5 * g.n_state, 10, seed=3)
    outputs = stencil_closure([5, 17, 40, 101, 150], g)
    sub = build_subnet(m, outputs)
    rng = np.random.default_rng(1)
    exact, worst = True, 0.0
    for _ in range(100):
        z = rng.standard_normal(4)
        y, jac = decode_with_jacobian(m, z)
        ys, js = sub.value_and_jacobian(z)
        exact &= ys.tobytes() == y[outputs].tobytes()
        worst = max(worst, np.abs(js - jac[outputs]).max())
    detail(request, f"values bitwise equal: {exact}, Jacobian max difference {worst:.1e} <= 1e-14")
    assert exact and worst <= 1e-14


@pytest.mark.criterion(5)
def test_gappy_pod_exactness(request):
    g = GridSpec(10, 10)  # N = 128
    phi = orthonormal(g.n_state, 6, 7)
    plan = build_plan(phi, 14, g)
    p = plan.projector(phi)
    rng = np.random.default_rng(0)
    exact = max(np.linalg.norm(p @ r - r) for r in (phi @ rng.standard_normal((6, 20))).T)
    idem = np.abs(p @ p - p).max()
    detail(request, f"max ||P r - r|| {exact:.1e}, max |P^2 - P| {idem:.1e} (<= 1e-10, N = {g.n_state})")
    assert exact <= 1e-10 and idem <= 1e-10


@pytest.mark.criterion(6)
def test_gauss_newton_affine(request):
    rng = np.random.default_rng(11)
    iters, worst = set(), 0.0
    for _ in range(50):
        n = int(rng.integers(1, 9))
        a = rng.standard_normal((n + int(rng.integers(0, 10)), n))
        b = a @ rng.standard_normal(n)
        out = gauss_newton(lambda z: a @ z - b, lambda z: a, np.zeros(n),
                           GaussNewtonConfig(abs_tol=1e-10, max_step=None))
        iters.add(out.iterations)
        worst = max(worst, np.linalg.norm(a @ out.z - b))
    detail(request, f"iterations {sorted(iters)}, max residual {worst:.1e} <= 1e-10")
    assert iters == {1} and worst <= 1e-10


@pytest.mark.criterion(7)
def test_full_sampling_limits(request):
    g = GridSpec(10, 10)
    cfg = FomConfig(1.0, n_t=20)
    gn = GaussNewtonConfig(abs_tol=1e-12)
    fom = run_fom(cfg, g)
    u_ref = initial_state(g, 1.0)
    phi = compute_basis((fom.states - u_ref).T, 6).vectors
    ls = run_ls_lspg(phi, u_ref, g, cfg, gn).decoded_states()
    ls_hr = run_ls_lspg_hr(phi, build_plan(np.eye(g.n_state), g.n_state, g), u_ref, cfg, gn).decoded_states()
    m = init_autoencoder(g.n_state, 3, 16, 5 * g.n_state, 10, seed=5)
    m.dec_w2 *= 0.05
    nm = run_nm_lspg(m, g, cfg, gn).decoded_states()
    nm_hr = run_nm_lspg_hr(m, build_plan(orthonormal(g.n_state, g.n_state, 2), g.n_state, g, m), cfg,
                           gn).decoded_states()
    d_ls, d_nm = np.abs(ls_hr - ls).max(), np.abs(nm_hr - nm).max()
    detail(request, f"LS max difference {d_ls:.1e}, NM max difference {d_nm:.1e} (<= 1e-8)")
    assert d_ls <= 1e-8 and d_nm <= 1e-8


@pytest.mark.criterion(8)
def test_file_round_trips(request):
    rng = np.random.default_rng(3)
    snap = SnapshotMatrix(rng.standard_normal((30, 7)), np.linspace(0.9, 1.1, 7), np.arange(7), rng.standard_normal(30))
    snap_ok = to_bytes(from_bytes(to_bytes(snap))) == to_bytes(snap)
    g = GridSpec(8, 8)
    m = init_autoencoder(g.n_state, 3, 10, 5 * g.n_state, 10, seed=1)
    raw_m = model_to_bytes(m)
    back = model_from_bytes(raw_m)
    model_ok = model_to_bytes(back) == raw_m and all(
        getattr(back, k).tobytes() == getattr(m, k).tobytes() for k in PARAM_NAMES)
    plan = build_plan(orthonormal(g.n_state, 6, 0), 9, g, m)
    raw_p = plan_to_bytes(plan)
    plan_ok = plan_to_bytes(plan_from_bytes(raw_p)) == raw_p
    detail(request, f"snapshot {snap_ok}, model {model_ok}, plan {plan_ok}")
    assert snap_ok and model_ok and plan_ok


# -- desk-scale suite ---------------------------------------------------------


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    keep = os.environ.get("NMROM_DESK_DIR")
    out = keep or str(tmp_path_factory.mktemp("desk"))
    cfg = ExperimentConfig.preset("desk").override("output_dir", out)
    return Workbench(cfg, reuse_models=bool(keep))


@pytest.fixture(scope="session")
def desk_runs(desk):
    cache = {}

    def run(method, mu=1.0, n_r=None, n_z=None):
        key = (method, mu, n_r, n_z)
        if key not in cache:
            cache[key] = desk.run(method, mu, desk.cfg.latent_dim, n_r, n_z)
        return cache[key]

    return run


@pytest.fixture(scope="session")
def hr_table(desk, desk_runs):
    out = {}
    for n_r, n_z in desk.cfg.hr_budgets:
        nm = desk_runs("NM-LSPG-HR", n_r=n_r, n_z=n_z)[1].max_rel_error
        ls = desk_runs("LS-LSPG-HR", n_r=n_r, n_z=n_z)[1].max_rel_error
        out[(n_r, n_z)] = (nm, ls)
    return out


def fmt_table(table):
    return ", ".join(f"({r},{z}): NM-HR {nm:.4f} LS-HR {ls:.4f}" for (r, z), (nm, ls) in table.items())


@pytest.mark.desk
@pytest.mark.criterion(9)
def test_desk_projection_ordering(request, desk):
    mu, n_s = desk.cfg.target_mu, desk.cfg.latent_dim
    fom, u_ref = desk.fom(mu), desk.u_ref(mu)
    nm = nm_projection_error(desk.model(n_s), fom, u_ref)
    ls = ls_projection_error(desk.pod(n_s), fom, u_ref)
    detail(request, f"NM projection {nm:.4f} <= LS projection {ls:.4f}")
    assert nm <= ls


@pytest.mark.desk
@pytest.mark.criterion(10)
def test_desk_nm_beats_ls(request, desk, desk_runs):
    nm_traj, nm = desk_runs("NM-LSPG")
    _, ls = desk_runs("LS-LSPG")
    median_gn = float(np.median(nm_traj.gn_iterations))
    detail(request, f"NM-LSPG {nm.max_rel_error:.4f} < LS-LSPG {ls.max_rel_error:.4f}, "
                    f"median GN iterations {median_gn:g}")
    assert nm.max_rel_error < ls.max_rel_error
    assert median_gn <= desk.cfg.gn_config().max_iter / 2


@pytest.mark.desk
@pytest.mark.criterion(11)
def test_desk_hr_matches_nm(request, desk, desk_runs, hr_table):
    nm = desk_runs("NM-LSPG")[1].max_rel_error
    cap = 0.1 * desk.grid.n_state
    ok = [b for b, (err, _) in hr_table.items() if max(b) <= cap and err <= 2 * nm]
    detail(request, f"budgets with NM-HR <= 2 x NM-LSPG ({2 * nm:.4f}) and n_r, n_z <= {cap:g}: {ok}")
    assert ok


@pytest.mark.desk
@pytest.mark.criterion(12)
def test_desk_ls_hr_worse(request, hr_table):
    bad = [b for b, (nm, ls) in hr_table.items() if ls < 2 * nm]
    detail(request, fmt_table(hr_table))
    assert not bad, f"LS-HR < 2 x NM-HR at {bad}"


@pytest.mark.desk
@pytest.mark.criterion(13)
def test_desk_trust_region(request, desk_runs):
    inside = {mu: desk_runs("NM-LSPG", mu)[1].max_rel_error for mu in (0.9, 1.0, 1.1)}
    outside = {mu: desk_runs("NM-LSPG", mu)[1].max_rel_error for mu in (0.85, 1.15)}
    detail(request, "inside " + ", ".join(f"{k:g}: {v:.4f}" for k, v in inside.items())
           + "; outside " + ", ".join(f"{k:g}: {v:.4f}" for k, v in outside.items()))
    assert max(inside.values()) < min(outside.values())


# -- full scale ---------------------------------------------------------------

full_scale = pytest.mark.skipif(os.environ.get("NMROM_FULL_SCALE") != "1",
                                reason="60x60 reproduction runs only with NMROM_FULL_SCALE=1")


@pytest.fixture(scope="session")
def paper(tmp_path_factory):
    keep = os.environ.get("NMROM_FULL_DIR")
    out = keep or str(tmp_path_factory.mktemp("paper"))
    cfg = ExperimentConfig.preset("paper").override("output_dir", out)
    return Workbench(cfg, reuse_models=bool(keep))


@pytest.mark.fullscale
@pytest.mark.criterion(14)
@full_scale
def test_full_scale_nm_hr(request, paper):
    n_r, n_z = paper.cfg.sweep_budget
    _, rep = paper.run("NM-LSPG-HR", 1.0, 5, n_r, n_z)
    rep.fom_wall_clock_seconds = paper.timed_fom(1.0)
    detail(request, f"({n_r},{n_z}) error {rep.max_rel_error:.4f} <= 0.05, speedup {rep.speedup:.2f} >= 5")
    assert rep.max_rel_error <= 0.05 and rep.speedup >= 5


@pytest.mark.fullscale
@pytest.mark.criterion(15)
@full_scale
def test_full_scale_ls_hr(request, paper):
    _, rep = paper.run("LS-LSPG-HR", 1.0, 5, 59, 59)
    detail(request, f"(59,59) error {rep.max_rel_error:.4f} >= 0.20")
    assert rep.max_rel_error >= 0.20
