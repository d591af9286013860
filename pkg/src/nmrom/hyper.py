"""Gappy-POD hyper-reduction for the LSPG solvers.

Only ``n_z`` sampled rows of the backward-Euler residual are ever formed. The
residual is fitted in a residual basis ``Phi_r`` by least squares on those
rows, ``r_hat = (Z^T Phi_r)^+ Z^T r``, and Gauss-Newton minimizes
``||r_hat||``. The sampling matrix ``Z`` is kept as an index list.

Evaluating the sampled rows needs the decoder outputs on their stencils (the
*closure*). For the masked decoder a *subnet* computes exactly those outputs:
the closure rows of the sparse last layer plus the hidden units they reach.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import _kernels
from ._binio import Reader, Writer
from .autoencoder import ACTIVATION, encode, read_raw_block, write_raw_block
from .errors import ConfigError, DimensionError, FormatError, SingularSystemError
from .fom import GridSpec, stencil_table
from .lspg import GaussNewtonConfig, LinearDecoder, NonlinearDecoder, initial_state_deviation, integrate

MAGIC = b"ROMPLAN1"
RANK_TOL = 1e-12


# -- sampling -----------------------------------------------------------------


def select_sample_indices(basis, n_z):
    """Greedy DEIM row selection with cyclic oversampling.

    The first ``n_r`` rows follow DEIM: row ``k`` is where basis column ``k``
    is worst interpolated by the previous columns on the rows chosen so far.
    Extra rows cycle over the columns ``0, 1, ...``, each time fitting column
    ``c`` by columns ``0..c-1`` in least squares on the chosen rows and taking
    the largest-error row not yet chosen. Ties go to the lowest index.
    """
    phi = np.asarray(getattr(basis, "vectors", basis), dtype=np.float64)
    n, n_r = phi.shape
    if not n_r <= n_z <= n:
        raise ConfigError(f"need n_r <= n_z <= N, got n_r={n_r}, n_z={n_z}, N={n}")
    chosen = []
    taken = np.zeros(n, dtype=bool)

    def pick(err):
        score = np.abs(err)
        score[taken] = -1.0
        p = int(np.argmax(score))
        chosen.append(p)
        taken[p] = True

    pick(phi[:, 0])
    for k in range(1, n_r):
        rows = np.array(chosen)
        try:
            coef = np.linalg.solve(phi[rows, :k], phi[rows, k])
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"DEIM interpolation block singular at column {k}") from exc
        pick(phi[:, k] - phi[:, :k] @ coef)
    for extra in range(n_z - n_r):
        c = extra % n_r
        if c == 0:
            pick(phi[:, 0])
            continue
        rows = np.array(chosen)
        coef = np.linalg.lstsq(phi[rows, :c], phi[rows, c], rcond=None)[0]
        pick(phi[:, c] - phi[:, :c] @ coef)
    indices = np.array(chosen, dtype=np.int64)
    sampled_rank_check(phi[indices])
    return indices


def sampled_rank_check(block):
    sigma = sla.svdvals(block)
    smin = float(sigma[-1]) if sigma.size else 0.0
    if sigma.size < block.shape[1] or smin <= RANK_TOL:
        raise SingularSystemError(
            f"sampled basis block is rank deficient (smallest singular value {smin:.3e})", smin
        )
    return smin


def precompute_pseudo_inverse(basis, indices):
    """``(Z^T Phi_r)^+`` by thin QR, ``R^{-1} Q^T``."""
    phi = np.asarray(getattr(basis, "vectors", basis), dtype=np.float64)
    block = phi[np.asarray(indices)]
    if block.shape[0] < block.shape[1]:
        raise ConfigError(f"{block.shape[0]} samples cannot determine {block.shape[1]} coefficients")
    sampled_rank_check(block)
    q, r = np.linalg.qr(block)
    return sla.solve_triangular(r, q.T)


def stencil_closure(sample_indices, grid):
    """Sorted decoder outputs needed to evaluate the sampled residual rows.

    Each sampled row contributes both velocity components at its node and at
    its interior left/right/down/up neighbours.
    """
    idx = np.asarray(sample_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= grid.n_state):
        raise DimensionError("sample index outside the state")
    table = stencil_table(grid)
    nodes = table[idx % grid.n_nodes, :5].ravel()
    nodes = nodes[nodes != grid.n_state]
    return np.unique(np.concatenate([nodes, nodes + grid.n_nodes]))


# -- subnet -------------------------------------------------------------------


@dataclass
class Subnet:
    """Decoder restricted to ``outputs`` and the hidden units they reach."""

    outputs: np.ndarray
    hidden: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    cols: np.ndarray  # indices into ``hidden``
    b2: np.ndarray

    @property
    def latent_dim(self):
        return self.w1.shape[1]

    @property
    def n_state(self):
        return self.outputs.shape[0]

    def mac_count(self, jacobian=True):
        """Multiply-accumulates of one evaluation (values, optionally Jacobian)."""
        macs = self.w1.size + self.w2.size
        if jacobian:
            macs += self.w2.size * self.latent_dim
        return macs

    def value(self, z):
        return _kernels.masked_decode(
            np.ascontiguousarray(z, dtype=np.float64), self.w1, self.b1, self.w2, self.cols, self.b2
        )[0]

    def value_and_jacobian(self, z):
        return _kernels.masked_decode(
            np.ascontiguousarray(z, dtype=np.float64), self.w1, self.b1, self.w2, self.cols, self.b2, True
        )


def build_subnet(model, outputs):
    outputs = np.unique(np.asarray(outputs, dtype=np.int64))
    if outputs.size == 0:
        raise DimensionError("subnet needs at least one output")
    if outputs[0] < 0 or outputs[-1] >= model.n_state:
        raise DimensionError("subnet output outside the decoder")
    cols = model.mask_cols[outputs]
    hidden = np.unique(cols)
    return Subnet(
        outputs=outputs,
        hidden=hidden,
        w1=np.ascontiguousarray(model.dec_w1[hidden]),
        b1=model.dec_b1[hidden].copy(),
        w2=np.ascontiguousarray(model.dec_w2[outputs]),
        cols=np.searchsorted(hidden, cols).astype(np.intp),
        b2=model.dec_b2[outputs].copy(),
    )


class LocalLinear:
    """``Phi z`` restricted to the closure rows."""

    def __init__(self, vectors, outputs):
        self.outputs = outputs
        self.rows = np.ascontiguousarray(np.asarray(vectors)[outputs])
        self.latent_dim = self.rows.shape[1]

    def value(self, z):
        return self.rows @ z

    def value_and_jacobian(self, z):
        return self.rows @ z, self.rows


# -- plan ---------------------------------------------------------------------


@dataclass
class HyperReductionPlan:
    grid: GridSpec
    sample_indices: np.ndarray
    pseudo_inverse: np.ndarray  # (n_r, n_z)
    closure_outputs: np.ndarray
    subnet: Subnet = None

    def __post_init__(self):
        n_r, n_z = self.pseudo_inverse.shape
        if self.sample_indices.shape != (n_z,):
            raise DimensionError("pseudo-inverse columns must match the sample count")
        if np.unique(self.sample_indices).size != n_z:
            raise DimensionError("sample indices must be distinct")
        self.sample_pos = np.searchsorted(self.closure_outputs, self.sample_indices)
        if not np.array_equal(self.closure_outputs[np.minimum(self.sample_pos, self.closure_outputs.size - 1)],
                              self.sample_indices):
            raise DimensionError("closure does not contain every sampled row")
        glob = stencil_table(self.grid)[self.sample_indices]
        local = np.searchsorted(self.closure_outputs, glob)
        m = self.closure_outputs.size
        local[glob == self.grid.n_state] = m
        if not np.all((local == m) | (self.closure_outputs[np.minimum(local, m - 1)] == glob)):
            raise DimensionError("closure is missing stencil neighbours of a sampled row")
        self.local_table = np.ascontiguousarray(local, dtype=np.intp)
        if self.subnet is not None and not np.array_equal(self.subnet.outputs, self.closure_outputs):
            raise DimensionError("subnet outputs must equal the closure")

    @property
    def n_r(self):
        return self.pseudo_inverse.shape[0]

    @property
    def n_z(self):
        return self.pseudo_inverse.shape[1]

    def closure_map(self):
        """Closure positions each sampled row reads (without boundary sentinels)."""
        m = self.closure_outputs.size
        return [sorted(set(row[row != m].tolist())) for row in self.local_table]

    def coefficients(self, sampled):
        """Generalized coordinates ``(Z^T Phi_r)^+`` applied to sampled rows."""
        return self.pseudo_inverse @ sampled

    def reconstruct(self, residual_basis, full):
        """Gappy reconstruction ``P r = Phi_r (Z^T Phi_r)^+ Z^T r``."""
        phi = getattr(residual_basis, "vectors", residual_basis)
        return phi @ (self.pseudo_inverse @ full[self.sample_indices])

    def projector(self, residual_basis):
        """Dense oblique projector; only for small test problems."""
        phi = getattr(residual_basis, "vectors", residual_basis)
        n = phi.shape[0]
        if n > 2000:
            raise DimensionError("refusing to materialize a projector with N > 2000")
        proj = np.zeros((n, n))
        proj[:, self.sample_indices] = phi @ self.pseudo_inverse
        return proj


def build_plan(residual_basis, n_z, grid, model=None, latent_dim=1):
    """Sample, precompute the pseudo-inverse and closure, and extract a subnet.

    ``latent_dim`` only enforces ``n_s <= n_r`` when no model is given.
    """
    phi = getattr(residual_basis, "vectors", residual_basis)
    if phi.shape[0] != grid.n_state:
        raise DimensionError(f"residual basis has {phi.shape[0]} rows, grid needs {grid.n_state}")
    n_s = model.latent_dim if model is not None else latent_dim
    if phi.shape[1] < n_s:
        raise ConfigError(f"need n_s <= n_r, got n_s={n_s}, n_r={phi.shape[1]}")
    indices = select_sample_indices(phi, n_z)
    return plan_from_indices(phi, indices, grid, model)


def plan_from_indices(residual_basis, indices, grid, model=None):
    indices = np.asarray(indices, dtype=np.int64)
    pinv = precompute_pseudo_inverse(residual_basis, indices)
    closure = stencil_closure(indices, grid)
    subnet = build_subnet(model, closure) if model is not None else None
    return HyperReductionPlan(grid, indices, pinv, closure, subnet)


# -- hyper-reduced residual ---------------------------------------------------


class HyperReducedResidual:
    """Projected sampled residual ``(Z^T Phi_r)^+ Z^T r`` and its Jacobian.

    ``local`` evaluates the decoder on the closure rows only (a
    :class:`Subnet` or :class:`LocalLinear`). With ``instrument=True`` the
    decoder multiply-accumulates are tallied in ``macs``.
    """

    def __init__(self, local, plan, cfg, u_ref, instrument=False):
        grid = plan.grid
        if u_ref.shape != (grid.n_state,):
            raise DimensionError("reference state does not match the plan grid")
        if local.latent_dim > plan.n_r:
            raise ConfigError(f"need n_s <= n_r, got n_s={local.latent_dim}, n_r={plan.n_r}")
        self.local = local
        self.plan = plan
        self.table = plan.local_table
        self.pos = plan.sample_pos
        self.pinv = np.ascontiguousarray(plan.pseudo_inverse)
        self.hx, self.hy, self.inv_re = grid.hx, grid.hy, 1.0 / cfg.re
        self.dt = cfg.dt
        m = plan.closure_outputs.size
        self.u_ref_loc = u_ref[plan.closure_outputs]
        self.ext = np.zeros(m + 1)
        self.jac_ext = np.zeros((m + 1, local.latent_dim))
        self.g_prev = None
        self.instrument = instrument
        self.macs = 0

    def _count(self, jacobian):
        if self.instrument:
            if isinstance(self.local, Subnet):
                self.macs += self.local.mac_count(jacobian)
            else:
                self.macs += self.local.rows.size

    def start_step(self, z_prev):
        self._count(False)
        self.g_prev = self.local.value(z_prev)[self.pos]

    def sampled(self, z):
        """Sampled residual rows and their Jacobian, before projection."""
        self._count(True)
        g, jac_g = self.local.value_and_jacobian(z)
        self.ext[:-1] = self.u_ref_loc + g
        f, dfd = _kernels.stencil_eval(self.ext, self.table, self.hx, self.hy, self.inv_re)
        res = g[self.pos] - self.g_prev - self.dt * f
        self.jac_ext[:-1] = jac_g
        jac = jac_g[self.pos] - self.dt * _kernels.gather_rows(dfd, self.table, self.jac_ext)
        return res, jac

    def __call__(self, z):
        res, jac = self.sampled(z)
        return self.pinv @ res, self.pinv @ jac


def hr_residual(z_n, z_prev, plan, model, cfg, u_ref=None):
    """Hyper-reduced NM residual for one pair of latent states."""
    if plan.subnet is None:
        raise ConfigError("plan has no decoder subnet")
    if u_ref is None:
        u_ref = model.reference_state(plan.grid, cfg.mu)
    res = HyperReducedResidual(plan.subnet, plan, cfg, u_ref)
    res.start_step(z_prev)
    return res(z_n)[0]


def run_nm_lspg_hr(model, plan, cfg, gn=GaussNewtonConfig(), strict=False):
    """NM-LSPG-HR; the timed loop touches only the subnet and sampled rows."""
    if plan.subnet is None:
        raise ConfigError("plan has no decoder subnet; build it with the model")
    grid = plan.grid
    u_ref = model.reference_state(grid, cfg.mu)
    z0 = encode(model, initial_state_deviation(grid, cfg, u_ref))
    residual = HyperReducedResidual(plan.subnet, plan, cfg, u_ref)
    return integrate(residual, NonlinearDecoder(model), z0, cfg, gn, "NM-LSPG-HR", grid, u_ref, strict)


def run_ls_lspg_hr(basis, plan, u_ref, cfg, gn=GaussNewtonConfig(), strict=False):
    """LS-LSPG-HR with trial basis ``basis`` (rows sampled on the closure)."""
    vectors = getattr(basis, "vectors", basis)
    grid = plan.grid
    decoder = LinearDecoder(vectors)
    z0 = decoder.vectors.T @ initial_state_deviation(grid, cfg, u_ref)
    residual = HyperReducedResidual(LocalLinear(vectors, plan.closure_outputs), plan, cfg, u_ref)
    return integrate(residual, decoder, z0, cfg, gn, "LS-LSPG-HR", grid, u_ref, strict)


# -- plan files ---------------------------------------------------------------
#
# "ROMPLAN1"
# u64 nx, ny
# u64 n_z, n_z x u64 sample indices
# u64 n_r, n_r*n_z float64 pseudo-inverse (row-major)
# u64 m, m x u64 closure outputs
# u64 subnet flag; when 1: u64 h, h x u64 hidden units, ROMAE001 block with
# empty encoder (mask columns index the retained hidden units)


def plan_to_bytes(plan):
    w = Writer()
    w.raw(MAGIC)
    w.u64(plan.grid.nx)
    w.u64(plan.grid.ny)
    w.u64(plan.n_z)
    w.u64_array(plan.sample_indices)
    w.u64(plan.n_r)
    w.f64_array(plan.pseudo_inverse.ravel())
    w.u64(plan.closure_outputs.size)
    w.u64_array(plan.closure_outputs)
    sub = plan.subnet
    if sub is None:
        w.u64(0)
    else:
        w.u64(1)
        w.u64(sub.hidden.size)
        w.u64_array(sub.hidden)
        n_s = sub.latent_dim
        tensors = {
            "enc_w1": np.zeros((0, sub.n_state)),
            "enc_b1": np.zeros(0),
            "enc_w2": np.zeros((n_s, 0)),
            "enc_b2": np.zeros(n_s),
            "dec_w1": sub.w1,
            "dec_b1": sub.b1,
            "dec_w2": sub.w2,
            "dec_b2": sub.b2,
        }
        write_raw_block(w, tensors, sub.cols, ACTIVATION, None, {"kind": "subnet"})
    return w.getvalue()


def plan_from_bytes(buf):
    r = Reader(buf)
    r.magic(MAGIC)
    grid_pos = r.pos
    nx, ny = r.count("nx", 1 << 24), r.count("ny", 1 << 24)
    try:
        grid = GridSpec(nx, ny)
    except ConfigError as exc:
        raise FormatError(str(exc), grid_pos) from exc
    n_z = r.count("sample count", grid.n_state)
    indices = r.u64_array(n_z, "sample indices")
    n_r = r.count("residual basis size", n_z)
    pinv = r.f64_array(n_r * n_z, "pseudo-inverse").reshape(n_r, n_z)
    m = r.count("closure size", grid.n_state)
    closure = r.u64_array(m, "closure outputs")
    flag_pos = r.pos
    flag = r.u64("subnet flag")
    subnet = None
    if flag == 1:
        h = r.count("subnet width")
        hidden = r.u64_array(h, "subnet hidden units")
        raw = read_raw_block(r)
        t = raw["tensors"]
        subnet = Subnet(closure.copy(), hidden, np.ascontiguousarray(t["dec_w1"]), t["dec_b1"],
                        np.ascontiguousarray(t["dec_w2"]), raw["cols"], t["dec_b2"])
        if subnet.w1.shape[0] != h or subnet.b2.shape[0] != m:
            raise FormatError("subnet block does not match the plan header", flag_pos)
    elif flag != 0:
        raise FormatError(f"bad subnet flag {flag}", flag_pos)
    r.end()
    try:
        return HyperReductionPlan(grid, indices, pinv, closure, subnet)
    except DimensionError as exc:
        raise FormatError(f"inconsistent plan: {exc}", 0) from exc


def save_plan(plan, path):
    with open(path, "wb") as fh:
        fh.write(plan_to_bytes(plan))


def load_plan(path):
    with open(path, "rb") as fh:
        return plan_from_bytes(fh.read())
