"""Full-order 2D viscous Burgers model on the unit square.

The state stacks the x-velocity block first, then the y-velocity block. Each
block runs row-major over the interior nodes: ``j`` outer, ``i`` inner, so
interior node ``(i, j)`` of component ``c`` sits at flat index
``c * n_nodes + (j - 1) * (nx - 2) + (i - 1)``. Dirichlet boundary values are
zero and never stored.

Convection uses first-order backward differences regardless of flow
direction; diffusion uses the 5-point central Laplacian.
"""

import functools
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels
from .errors import ConfigError, DimensionError, NewtonDivergedError

__all__ = [
    "GridSpec",
    "FomConfig",
    "Trajectory",
    "initial_state",
    "rhs",
    "be_residual",
    "be_jacobian",
    "solve_timestep",
    "run_fom",
]


@dataclass(frozen=True)
class GridSpec:
    """Uniform ``nx`` by ``ny`` node grid with spacing ``1/(nx-1)``, ``1/(ny-1)``."""

    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ConfigError(f"grid needs nx, ny >= 3, got {self.nx}x{self.ny}")

    @property
    def hx(self):
        return 1.0 / (self.nx - 1)

    @property
    def hy(self):
        return 1.0 / (self.ny - 1)

    @property
    def n_ix(self):
        return self.nx - 2

    @property
    def n_iy(self):
        return self.ny - 2

    @property
    def n_nodes(self):
        """Interior nodes per velocity component."""
        return self.n_ix * self.n_iy

    @property
    def n_state(self):
        return 2 * self.n_nodes

    def flat_index(self, comp, i, j):
        """Flat state index of interior node ``(i, j)``, ``1 <= i <= nx-2``."""
        if comp not in (0, 1) or not (1 <= i <= self.n_ix and 1 <= j <= self.n_iy):
            raise DimensionError(f"({comp}, {i}, {j}) is not an interior state entry")
        return comp * self.n_nodes + (j - 1) * self.n_ix + (i - 1)

    def node_of(self, index):
        """Inverse of :meth:`flat_index`: returns ``(comp, i, j)``."""
        if not 0 <= index < self.n_state:
            raise DimensionError(f"state index {index} out of range [0, {self.n_state})")
        comp, rem = divmod(int(index), self.n_nodes)
        jj, ii = divmod(rem, self.n_ix)
        return comp, ii + 1, jj + 1

    def coordinates(self):
        """``(x, y)`` of the interior nodes in per-component flat order."""
        x = np.arange(1, self.nx - 1) * self.hx
        y = np.arange(1, self.ny - 1) * self.hy
        xx, yy = np.meshgrid(x, y)  # rows follow j
        return xx.ravel(), yy.ravel()

    def check_state(self, u, name="state"):
        if u.shape != (self.n_state,):
            raise DimensionError(
                f"{name} has shape {u.shape}, grid {self.nx}x{self.ny} needs ({self.n_state},)"
            )


@dataclass(frozen=True)
class FomConfig:
    mu: float
    re: float = 10_000.0
    t_final: float = 2.0
    n_t: int = 1500
    newton_tol: float = 1e-10
    newton_max_iter: int = 25

    def __post_init__(self):
        if not np.isfinite(self.mu):
            raise ConfigError("mu must be finite")
        if self.re <= 0 or self.t_final <= 0:
            raise ConfigError("re and t_final must be positive")
        if self.n_t < 1 or self.newton_max_iter < 1:
            raise ConfigError("n_t and newton_max_iter must be >= 1")
        if self.newton_tol <= 0:
            raise ConfigError("newton_tol must be positive")

    @property
    def dt(self):
        return self.t_final / self.n_t

    def with_mu(self, mu):
        return FomConfig(mu, self.re, self.t_final, self.n_t, self.newton_tol, self.newton_max_iter)


@dataclass
class Trajectory:
    """FOM solution: ``states[n]`` is the state at ``t = n * dt``."""

    states: np.ndarray  # (n_t + 1, N)
    config: FomConfig
    grid: GridSpec
    wall_clock_seconds: float = 0.0
    newton_iterations: list = field(default_factory=list)

    def __post_init__(self):
        if self.states.shape != (self.config.n_t + 1, self.grid.n_state):
            raise DimensionError(
                f"trajectory states {self.states.shape} do not match "
                f"({self.config.n_t + 1}, {self.grid.n_state})"
            )

    @property
    def times(self):
        return np.arange(self.config.n_t + 1) * self.config.dt


@functools.lru_cache(maxsize=16)
def stencil_table(grid):
    """Neighbour table for every state row, in kernel slot order.

    Indices point into the state vector extended by one trailing zero
    (index ``N``) which stands in for boundary values.
    """
    nix, niy, n = grid.n_ix, grid.n_iy, grid.n_nodes
    big = grid.n_state
    jj, ii = np.divmod(np.arange(n), nix)
    p = np.arange(n)
    left = np.where(ii > 0, p - 1, -1)
    right = np.where(ii < nix - 1, p + 1, -1)
    down = np.where(jj > 0, p - nix, -1)
    up = np.where(jj < niy - 1, p + nix, -1)
    table = np.empty((big, 7), dtype=np.intp)
    for comp in (0, 1):
        off = comp * n
        rows = slice(off, off + n)
        for slot, nb in enumerate((p, left, right, down, up)):
            table[rows, slot] = np.where(nb >= 0, nb + off, big)
        table[rows, 5] = p
        table[rows, 6] = p + n
    table.setflags(write=False)
    return table


@functools.lru_cache(maxsize=16)
def _jacobian_layout(grid):
    """CSR pattern of the BE Jacobian and the scatter map from stencil slots."""
    big = grid.n_state
    table = stencil_table(grid)
    rows = np.repeat(np.arange(big), 7)
    cols = table.ravel()
    valid = cols != big
    keys = np.concatenate([rows[valid] * big + cols[valid], np.arange(big) * (big + 1)])
    uniq, inv = np.unique(keys, return_inverse=True)
    slot_pos = inv[: valid.sum()]
    diag_pos = inv[valid.sum():]
    indptr = np.searchsorted(uniq // big, np.arange(big + 1)).astype(np.int32)
    indices = (uniq % big).astype(np.int32)
    return valid, slot_pos, diag_pos, indptr, indices


def initial_state(grid, mu):
    """``mu sin(2 pi x) sin(2 pi y)`` on ``[0, 0.5]^2`` for both components, else 0."""
    x, y = grid.coordinates()
    inside = (x <= 0.5) & (y <= 0.5)
    block = np.where(inside, mu * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y), 0.0)
    return np.concatenate([block, block])


def _extend(u):
    ext = np.empty(u.shape[0] + 1)
    ext[:-1] = u
    ext[-1] = 0.0
    return ext


def rhs(u, grid, cfg):
    """Semi-discrete right-hand side ``f(u)``."""
    grid.check_state(u)
    return _kernels.stencil_rhs(_extend(u), stencil_table(grid), grid.hx, grid.hy, 1.0 / cfg.re)


def be_residual(u_n, u_prev, grid, cfg):
    """Backward-Euler residual ``u_n - u_prev - dt f(u_n)``."""
    grid.check_state(u_n, "u_n")
    if u_prev.shape != u_n.shape:
        raise DimensionError(f"u_prev shape {u_prev.shape} != u_n shape {u_n.shape}")
    return u_n - u_prev - cfg.dt * rhs(u_n, grid, cfg)


def _residual_and_jacobian(u, u_prev, grid, cfg):
    table = stencil_table(grid)
    f, dfd = _kernels.stencil_eval(_extend(u), table, grid.hx, grid.hy, 1.0 / cfg.re)
    return u - u_prev - cfg.dt * f, _assemble(dfd, grid, cfg.dt)


def _assemble(dfd, grid, dt):
    valid, slot_pos, diag_pos, indptr, indices = _jacobian_layout(grid)
    nnz = indices.shape[0]
    data = np.bincount(slot_pos, weights=-dt * dfd.ravel()[valid], minlength=nnz)
    data[diag_pos] += 1.0
    big = grid.n_state
    return sp.csr_matrix((data, indices, indptr), shape=(big, big))


def be_jacobian(u, grid, cfg):
    """Sparse ``I - dt df/du`` at ``u`` (CSR, at most 6 nonzeros per row)."""
    grid.check_state(u)
    _, dfd = _kernels.stencil_eval(_extend(u), stencil_table(grid), grid.hx, grid.hy, 1.0 / cfg.re)
    return _assemble(dfd, grid, cfg.dt)


def rhs_jacobian(u, grid, cfg):
    """Sparse ``df/du`` at ``u``."""
    identity = sp.identity(grid.n_state, format="csr")
    return (identity - be_jacobian(u, grid, cfg)) / cfg.dt


def solve_timestep(u_prev, grid, cfg, step=None):
    """One backward-Euler step by Newton's method started from ``u_prev``.

    Returns ``(u_n, iterations)``. Raises :class:`NewtonDivergedError` when the
    residual 2-norm stays above ``cfg.newton_tol`` after ``newton_max_iter``
    linear solves.
    """
    grid.check_state(u_prev, "u_prev")
    u = u_prev.copy()
    res, jac = _residual_and_jacobian(u, u_prev, grid, cfg)
    norm = np.linalg.norm(res)
    it = 0
    while norm > cfg.newton_tol:
        if it == cfg.newton_max_iter or not np.isfinite(norm):
            raise NewtonDivergedError(norm, it, step)
        u -= spla.spsolve(jac.tocsc(), res)
        it += 1
        res, jac = _residual_and_jacobian(u, u_prev, grid, cfg)
        norm = np.linalg.norm(res)
    return u, it


def run_fom(cfg, grid):
    """Integrate from the initial condition to ``t_final``.

    Only the time loop is timed.
    """
    states = np.empty((cfg.n_t + 1, grid.n_state))
    states[0] = initial_state(grid, cfg.mu)
    iters = []
    start = time.perf_counter()
    for n in range(1, cfg.n_t + 1):
        states[n], it = solve_timestep(states[n - 1], grid, cfg, step=n)
        iters.append(it)
    elapsed = time.perf_counter() - start
    return Trajectory(states, cfg, grid, elapsed, iters)
