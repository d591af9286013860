"""LSPG reduced-order models solved by Gauss-Newton at every time step.

Both trial manifolds share one pipeline: a decoder maps latent coordinates to
a state deviation, ``u = u_ref + g(z)``, and each backward-Euler step picks
``z`` minimizing the 2-norm of the full-order residual evaluated on the
manifold. The nonlinear decoder is the masked autoencoder; the linear one is
``g(z) = Phi z``.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import _kernels
from .autoencoder import decode, decode_with_jacobian, encode
from .errors import ConfigError, DimensionError, NumericalError, RomFailureError, SingularSystemError
from .fom import FomConfig, GridSpec, be_jacobian, initial_state, rhs, stencil_table
from .snapshots import SnapshotMatrix, fom_config_dict


@dataclass(frozen=True)
class GaussNewtonConfig:
    """Stopping rules for :func:`gauss_newton`.

    ``max_step`` caps the update norm; ``None`` disables the cap.
    """

    abs_tol: float = 1e-8
    step_tol: float = 1e-10
    max_iter: int = 20
    max_step: float = 10.0

    def __post_init__(self):
        if self.abs_tol <= 0 or self.step_tol <= 0:
            raise ConfigError("Gauss-Newton tolerances must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if self.max_step is not None and self.max_step <= 0:
            raise ConfigError("max_step must be positive or None")


@dataclass
class GNResult:
    z: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool
    reason: str


def lstsq_step(jac, res):
    """``argmin_d ||J d + r||`` via thin QR; raises on rank deficiency."""
    q, r = np.linalg.qr(jac)
    diag = np.abs(np.diag(r))
    scale = diag.max() if diag.size else 0.0
    tol = np.finfo(float).eps * max(jac.shape) * scale
    if scale == 0.0 or diag.min() <= tol:
        raise SingularSystemError(
            "Gauss-Newton Jacobian is rank deficient", float(diag.min()) if diag.size else 0.0
        )
    return -sla.solve_triangular(r, q.T @ res)


def solve(fun, start, cfg):
    """Gauss-Newton on ``fun(z) -> (residual, jacobian)``.

    ``iterations`` counts applied updates. A computed step shorter than
    ``step_tol`` counts as convergence and is not applied. On hitting
    ``max_iter`` the best iterate seen is returned with ``converged=False``.
    """
    z = np.array(start, dtype=np.float64)
    res, jac = fun(z)
    norm = float(np.linalg.norm(res))
    best_z, best_norm = z.copy(), norm
    it = 0
    while True:
        if not np.isfinite(norm):
            raise NumericalError(f"non-finite residual after {it} Gauss-Newton iterations")
        if norm <= cfg.abs_tol:
            return GNResult(z, it, norm, True, "abs_tol")
        if it == cfg.max_iter:
            return GNResult(best_z, it, best_norm, False, "max_iter")
        delta = lstsq_step(jac, res)
        step = float(np.linalg.norm(delta))
        if step <= cfg.step_tol:
            return GNResult(z, it, norm, True, "step_tol")
        if cfg.max_step is not None and step > cfg.max_step:
            delta *= cfg.max_step / step
        z = z + delta
        it += 1
        res, jac = fun(z)
        norm = float(np.linalg.norm(res))
        if norm < best_norm:
            best_z, best_norm = z.copy(), norm


def gauss_newton(residual_fn, jacobian_fn, start, cfg=GaussNewtonConfig()):
    """Minimize ``0.5 ||residual_fn(z)||^2`` from ``start``; see :func:`solve`."""
    return solve(lambda z: (residual_fn(z), jacobian_fn(z)), start, cfg)


# -- trial manifolds ----------------------------------------------------------


class NonlinearDecoder:
    def __init__(self, model):
        self.model = model
        self.latent_dim = model.latent_dim
        self.n_state = model.n_state

    def value(self, z):
        return decode(self.model, z)

    def value_and_jacobian(self, z):
        return decode_with_jacobian(self.model, z)


class LinearDecoder:
    def __init__(self, vectors):
        self.vectors = np.ascontiguousarray(vectors)
        self.n_state, self.latent_dim = self.vectors.shape

    def value(self, z):
        return self.vectors @ z

    def value_and_jacobian(self, z):
        return self.vectors @ z, self.vectors


# -- residuals ----------------------------------------------------------------


def nm_residual(z_n, z_prev, model, grid, cfg, u_ref):
    """``g(z_n) - g(z_prev) - dt f(u_ref + g(z_n))``."""
    g_n = decode(model, z_n)
    return g_n - decode(model, z_prev) - cfg.dt * rhs(u_ref + g_n, grid, cfg)


def nm_residual_jacobian(z_n, model, grid, cfg, u_ref):
    """``(I - dt df/du)|_{u_ref + g(z_n)} dg/dz``, shape ``(N, n_s)``."""
    g_n, jac_g = decode_with_jacobian(model, z_n)
    return be_jacobian(u_ref + g_n, grid, cfg) @ jac_g


class FullResidual:
    """Manifold BE residual and Jacobian over all ``N`` rows for one time step."""

    def __init__(self, decoder, grid, cfg, u_ref):
        if decoder.n_state != grid.n_state or u_ref.shape != (grid.n_state,):
            raise DimensionError("decoder, grid and reference state sizes disagree")
        self.decoder = decoder
        self.table = stencil_table(grid)
        self.hx, self.hy, self.inv_re = grid.hx, grid.hy, 1.0 / cfg.re
        self.dt = cfg.dt
        self.u_ref = u_ref
        self.ext = np.zeros(grid.n_state + 1)
        self.jac_ext = np.zeros((grid.n_state + 1, decoder.latent_dim))
        self.g_prev = None

    def start_step(self, z_prev):
        self.g_prev = self.decoder.value(z_prev)

    def __call__(self, z):
        g, jac_g = self.decoder.value_and_jacobian(z)
        self.ext[:-1] = self.u_ref + g
        f, dfd = _kernels.stencil_eval(self.ext, self.table, self.hx, self.hy, self.inv_re)
        res = g - self.g_prev - self.dt * f
        self.jac_ext[:-1] = jac_g
        jac = jac_g - self.dt * _kernels.gather_rows(dfd, self.table, self.jac_ext)
        return res, jac


# -- time integration ---------------------------------------------------------


@dataclass
class RomTrajectory:
    """Latent trajectory of a ROM run; decoded states are rebuilt on request."""

    latent: np.ndarray  # (n_t + 1, n_s)
    method: str
    config: object
    grid: object
    u_ref: np.ndarray
    decoder: object = None
    wall_clock_seconds: float = 0.0
    gn_iterations: list = field(default_factory=list)
    nonconverged_steps: list = field(default_factory=list)
    failed: bool = False
    failure: str = ""

    def decoded_state(self, n):
        return self.u_ref + self.decoder.value(self.latent[n])

    def decoded_states(self):
        """All decoded states, ``(n_t + 1, N)``."""
        g = np.array([self.decoder.value(z) for z in self.latent])
        return self.u_ref + g


def integrate(residual, decoder, z0, cfg, gn, method, grid, u_ref, strict=False):
    """March ``n_t`` backward-Euler steps, each a Gauss-Newton solve.

    ``residual`` follows the :class:`FullResidual` protocol:
    ``start_step(z_prev)`` once per step, then calls returning the residual
    and its Jacobian. Only the time loop is timed.
    On a numerical failure the trajectory is returned with ``failed=True``
    and the latent states computed so far; with ``strict=True`` a
    :class:`RomFailureError` is raised instead, as it is for non-convergence.
    """
    latent = np.full((cfg.n_t + 1, decoder.latent_dim), np.nan)
    latent[0] = z0
    traj = RomTrajectory(latent, method, cfg, grid, u_ref, decoder)
    start = time.perf_counter()
    z = latent[0]
    for n in range(1, cfg.n_t + 1):
        residual.start_step(z)
        try:
            out = solve(residual, z, gn)
        except NumericalError as exc:
            if strict:
                raise RomFailureError(str(exc), n) from exc
            traj.failed, traj.failure = True, f"step {n}: {exc}"
            break
        if not out.converged:
            if strict:
                raise RomFailureError("Gauss-Newton did not converge", n)
            traj.nonconverged_steps.append(n)
        z = out.z
        latent[n] = z
        traj.gn_iterations.append(out.iterations)
    traj.wall_clock_seconds = time.perf_counter() - start
    return traj


def run_nm_lspg(model, grid, cfg, gn=GaussNewtonConfig(), strict=False):
    """NM-LSPG: nonlinear-manifold LSPG without hyper-reduction."""
    u_ref = model.reference_state(grid, cfg.mu)
    decoder = NonlinearDecoder(model)
    z0 = encode(model, initial_state_deviation(grid, cfg, u_ref))
    residual = FullResidual(decoder, grid, cfg, u_ref)
    return integrate(residual, decoder, z0, cfg, gn, "NM-LSPG", grid, u_ref, strict)


def run_ls_lspg(basis, u_ref, grid, cfg, gn=GaussNewtonConfig(), strict=False):
    """LS-LSPG: linear-subspace LSPG with trial basis ``Phi``."""
    vectors = getattr(basis, "vectors", basis)
    decoder = LinearDecoder(vectors)
    z0 = decoder.vectors.T @ initial_state_deviation(grid, cfg, u_ref)
    residual = FullResidual(decoder, grid, cfg, u_ref)
    return integrate(residual, decoder, z0, cfg, gn, "LS-LSPG", grid, u_ref, strict)


def initial_state_deviation(grid, cfg, u_ref):
    return initial_state(grid, cfg.mu) - u_ref


# -- persistence --------------------------------------------------------------


def rom_trajectory_to_snapshots(traj):
    """Latent states as ROMSNAP1 columns; ``u_ref`` and run data go in the JSON attributes."""
    n_cols = traj.latent.shape[0]
    attrs = {
        "kind": "rom-trajectory",
        "method": traj.method,
        "grid": [traj.grid.nx, traj.grid.ny],
        "fom": fom_config_dict(traj.config),
        "wall_clock_seconds": traj.wall_clock_seconds,
        "gn_iterations": list(map(int, traj.gn_iterations)),
        "nonconverged_steps": list(map(int, traj.nonconverged_steps)),
        "failed": traj.failed,
        "failure": traj.failure,
        "u_ref": [float(v) for v in traj.u_ref],
    }
    # unreached steps of a failed run stay NaN in memory but are stored as zeros
    latent = np.where(np.isfinite(traj.latent), traj.latent, 0.0)
    return SnapshotMatrix(
        latent.T.copy(), np.full(n_cols, traj.config.mu), np.arange(n_cols), attrs=attrs
    )


def rom_trajectory_from_snapshots(m, decoder=None):
    a = m.attrs
    if a.get("kind") != "rom-trajectory":
        raise DimensionError("snapshot file does not hold a ROM trajectory")
    grid = GridSpec(*a["grid"])
    latent = m.data.T.copy()
    if decoder is not None and decoder.latent_dim != latent.shape[1]:
        raise DimensionError(f"decoder latent size {decoder.latent_dim} does not match {latent.shape[1]}")
    u_ref = np.asarray(a["u_ref"], dtype=np.float64)
    if u_ref.shape != (grid.n_state,):
        raise DimensionError("stored reference state does not match the grid")
    traj = RomTrajectory(
        latent, a["method"], FomConfig(**a["fom"]), grid, u_ref, decoder,
        a["wall_clock_seconds"], a["gn_iterations"], a["nonconverged_steps"], a["failed"], a["failure"],
    )
    if traj.failed:
        traj.latent[len(traj.gn_iterations) + 1 :] = np.nan
    return traj
