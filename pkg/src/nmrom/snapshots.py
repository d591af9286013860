"""Snapshot matrices: ROMSNAP1 binary files, CSV export, training-set assembly.

ROMSNAP1 layout (all little-endian)::

    "ROMSNAP1"
    u64 rows N, u64 cols M, u64 flags
    N*M float64, column-major
    flags & 1: M records of (float64 mu, uint64 time index)
    flags & 2: N float64 reference state
    flags & 4: u64 length + UTF-8 JSON attribute object

The attribute block carries provenance such as the reference-state policy,
the grid, or the source tag of a basis.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from ._binio import Reader, Writer
from .errors import DimensionError, FormatError
from .fom import FomConfig, GridSpec, Trajectory, initial_state

MAGIC = b"ROMSNAP1"
FLAG_META = 1
FLAG_REF = 2
FLAG_ATTRS = 4

_META_DTYPE = np.dtype([("mu", "<f8"), ("step", "<u8")])


@dataclass
class SnapshotMatrix:
    """Column-per-snapshot matrix with optional per-column ``(mu, step)`` tags.

    When ``reference_state`` is set (or ``attrs["u_ref_policy"]`` says so) the
    columns hold deviations from the reference rather than raw states.
    """

    data: np.ndarray
    mus: np.ndarray = None
    steps: np.ndarray = None
    reference_state: np.ndarray = None
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DimensionError(f"snapshot data must be 2-D, got shape {self.data.shape}")
        if (self.mus is None) != (self.steps is None):
            raise DimensionError("mus and steps must be given together")
        if self.mus is not None:
            self.mus = np.asarray(self.mus, dtype=np.float64)
            self.steps = np.asarray(self.steps, dtype=np.int64)
            if self.mus.shape != (self.n_cols,) or self.steps.shape != (self.n_cols,):
                raise DimensionError("column metadata length must equal the column count")
        if self.reference_state is not None:
            self.reference_state = np.asarray(self.reference_state, dtype=np.float64)
            if self.reference_state.shape != (self.n_rows,):
                raise DimensionError("reference state length must equal the row count")

    @property
    def n_rows(self):
        return self.data.shape[0]

    @property
    def n_cols(self):
        return self.data.shape[1]


def to_bytes(m):
    w = Writer()
    w.raw(MAGIC)
    flags = (
        (FLAG_META if m.mus is not None else 0)
        | (FLAG_REF if m.reference_state is not None else 0)
        | (FLAG_ATTRS if m.attrs else 0)
    )
    w.u64(m.n_rows)
    w.u64(m.n_cols)
    w.u64(flags)
    w.f64_array(m.data.ravel(order="F"))
    if m.mus is not None:
        meta = np.empty(m.n_cols, dtype=_META_DTYPE)
        meta["mu"] = m.mus
        meta["step"] = m.steps
        w.raw(meta.tobytes())
    if m.reference_state is not None:
        w.f64_array(m.reference_state)
    if m.attrs:
        w.json(m.attrs)
    return w.getvalue()


def from_bytes(buf, reader=None):
    r = reader or Reader(buf)
    r.magic(MAGIC)
    n = r.count("row count")
    cols = r.count("column count")
    if n and cols > (1 << 40) // n:
        raise FormatError(f"dimensions {n} x {cols} overflow", 8)
    flag_pos = r.pos
    flags = r.u64("flags")
    if flags & ~(FLAG_META | FLAG_REF | FLAG_ATTRS):
        raise FormatError(f"unknown flag bits {flags:#x}", flag_pos)
    data_pos = r.pos
    data = r.f64_array(n * cols, "snapshot data").reshape((n, cols), order="F")
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data.ravel(order="F")))[0])
        raise FormatError("non-finite snapshot value", data_pos + 8 * bad)
    mus = steps = ref = None
    attrs = {}
    if flags & FLAG_META:
        raw = r._take(cols * _META_DTYPE.itemsize, "column metadata")
        meta = np.frombuffer(raw, dtype=_META_DTYPE)
        mus = meta["mu"].astype(np.float64)
        steps = meta["step"].astype(np.int64)
    if flags & FLAG_REF:
        ref = r.f64_array(n, "reference state")
    if flags & FLAG_ATTRS:
        attrs = r.json("attributes")
    if reader is None:
        r.end()
    return SnapshotMatrix(data, mus, steps, ref, attrs)


def write_snapshots(m, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(m))


def read_snapshots(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def write_csv(m, path):
    """One column per snapshot, ``%.17g`` formatting, header ``s0,s1,...``."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow([f"s{k}" for k in range(m.n_cols)])
        for row in m.data:
            out.writerow(["%.17g" % v for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError("empty CSV file", 0)
    n_cols = len(rows[0]) if rows[0] != [] else 0
    data = np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float64)
    return SnapshotMatrix(data.reshape(len(rows) - 1, n_cols))


def reference_state(policy, grid, mu, fixed=None):
    """Reference state ``u_ref(mu)`` under a named policy.

    ``"initial"`` uses the parameterized initial condition, ``"zero"`` the
    zero state, ``"fixed"`` the given vector for every parameter.
    """
    if policy == "initial":
        return initial_state(grid, mu)
    if policy == "zero":
        return np.zeros(grid.n_state)
    if policy == "fixed":
        if fixed is None:
            raise DimensionError("fixed reference policy needs a reference vector")
        return np.asarray(fixed, dtype=np.float64)
    raise DimensionError(f"unknown reference policy {policy!r}")


def fom_config_dict(cfg):
    return {
        "mu": cfg.mu,
        "re": cfg.re,
        "t_final": cfg.t_final,
        "n_t": cfg.n_t,
        "newton_tol": cfg.newton_tol,
        "newton_max_iter": cfg.newton_max_iter,
    }


def trajectory_to_snapshots(traj):
    n_cols = traj.states.shape[0]
    cfg = traj.config
    attrs = {
        "kind": "fom-trajectory",
        "grid": [traj.grid.nx, traj.grid.ny],
        "fom": fom_config_dict(cfg),
        "wall_clock_seconds": traj.wall_clock_seconds,
        "newton_iterations": list(map(int, traj.newton_iterations)),
    }
    return SnapshotMatrix(
        traj.states.T.copy(),
        np.full(n_cols, cfg.mu),
        np.arange(n_cols),
        attrs=attrs,
    )


def trajectory_from_snapshots(m):
    if m.attrs.get("kind") != "fom-trajectory":
        raise DimensionError("snapshot file does not hold a FOM trajectory")
    grid = GridSpec(*m.attrs["grid"])
    cfg = FomConfig(**m.attrs["fom"])
    return Trajectory(
        m.data.T.copy(),
        cfg,
        grid,
        m.attrs.get("wall_clock_seconds", 0.0),
        m.attrs.get("newton_iterations", []),
    )


def assemble_training_set(trajectories, u_ref_policy="initial", fixed_reference=None):
    """Stack every state of every trajectory as deviations from ``u_ref(mu)``."""
    if not trajectories:
        raise DimensionError("need at least one trajectory")
    grid = trajectories[0].grid
    blocks, mus, steps = [], [], []
    for traj in trajectories:
        if traj.grid != grid:
            raise DimensionError(f"trajectory grid {traj.grid} differs from {grid}")
        ref = reference_state(u_ref_policy, grid, traj.config.mu, fixed_reference)
        blocks.append((traj.states - ref).T)
        mus.append(np.full(traj.states.shape[0], traj.config.mu))
        steps.append(np.arange(traj.states.shape[0]))
    attrs = {"kind": "training-set", "u_ref_policy": u_ref_policy, "grid": [grid.nx, grid.ny]}
    return SnapshotMatrix(
        np.hstack(blocks),
        np.concatenate(mus),
        np.concatenate(steps),
        fixed_reference if u_ref_policy == "fixed" else None,
        attrs,
    )


@dataclass(frozen=True)
class DatasetSplit:
    train_indices: np.ndarray
    validation_indices: np.ndarray


def split_dataset(m, seed):
    """Seeded uniform split: ``max(1, floor(M / 10))`` validation columns."""
    n = m.n_cols if isinstance(m, SnapshotMatrix) else int(m)
    if n < 2:
        raise DimensionError(f"need at least 2 columns to split, got {n}")
    n_val = max(1, n // 10)
    perm = np.random.default_rng(seed).permutation(n)
    return DatasetSplit(np.sort(perm[n_val:]), np.sort(perm[:n_val]))
