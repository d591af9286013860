"""POD bases from the thin SVD of a snapshot matrix."""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .snapshots import SnapshotMatrix, read_snapshots, write_snapshots


@dataclass
class ReducedBasis:
    """Orthonormal ``N x k`` basis with its singular values.

    ``source`` records where the basis came from, e.g. ``"solution-snapshots"``.
    """

    vectors: np.ndarray
    singular_values: np.ndarray
    source: str = "solution-snapshots"

    @property
    def n_rows(self):
        return self.vectors.shape[0]

    @property
    def k(self):
        return self.vectors.shape[1]

    def truncate(self, k):
        if not 1 <= k <= self.k:
            raise DimensionError(f"cannot truncate a {self.k}-column basis to {k}")
        return ReducedBasis(self.vectors[:, :k].copy(), self.singular_values[:k].copy(), self.source)

    def project(self, x):
        """Orthogonal projection ``Phi Phi^T x``."""
        return self.vectors @ (self.vectors.T @ x)


def _fix_signs(u):
    # largest-magnitude entry of each column positive (lowest index on ties)
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def compute_basis(m, k, source="solution-snapshots"):
    """Leading ``k`` left singular vectors of ``m`` (matrix or SnapshotMatrix)."""
    data = m.data if isinstance(m, SnapshotMatrix) else np.asarray(m, dtype=np.float64)
    n, cols = data.shape
    if not 1 <= k <= min(n, cols):
        raise DimensionError(f"basis size k={k} outside [1, {min(n, cols)}]")
    u, s, _ = np.linalg.svd(data, full_matrices=False)
    return ReducedBasis(_fix_signs(u[:, :k]), s[:k].copy(), source)


def relative_errors(approx, states):
    """Per-step ``||approx - state|| / ||state||``; zero states use the absolute error."""
    num = np.linalg.norm(approx - states, axis=1)
    den = np.linalg.norm(states, axis=1)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), num)


def ls_projection_error(basis, traj, u_ref):
    """``max_n ||(I - Phi Phi^T)(u^n - u_ref)|| / ||u^n||`` over the trajectory.

    ``u_ref`` is a single state, or an array with one reference per step.
    """
    phi = basis.vectors
    states = traj.states
    if phi.shape[0] != states.shape[1]:
        raise DimensionError(f"basis has {phi.shape[0]} rows, states have {states.shape[1]}")
    dev = states - u_ref
    approx = u_ref + (dev @ phi) @ phi.T
    return float(np.max(relative_errors(approx, states)))


def basis_to_snapshots(basis):
    """ROMSNAP1 view of a basis: one column per mode, source tag in the metadata."""
    attrs = {"kind": "reduced-basis", "source": basis.source,
             "singular_values": [float(v) for v in basis.singular_values]}
    return SnapshotMatrix(basis.vectors, attrs=attrs)


def basis_from_snapshots(m):
    if m.attrs.get("kind") != "reduced-basis":
        raise DimensionError("snapshot file does not hold a reduced basis")
    sv = np.asarray(m.attrs["singular_values"], dtype=np.float64)
    if sv.shape != (m.n_cols,):
        raise DimensionError("singular value count does not match the basis width")
    return ReducedBasis(m.data.copy(), sv, m.attrs.get("source", "solution-snapshots"))


def save_basis(basis, path):
    write_snapshots(basis_to_snapshots(basis), path)


def load_basis(path):
    return basis_from_snapshots(read_snapshots(path))
