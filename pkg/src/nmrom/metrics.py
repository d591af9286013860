"""Error metrics, timing, and run reports."""

import json
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError
from .pod import relative_errors

METHODS = ("FOM", "LS-LSPG", "NM-LSPG", "LS-LSPG-HR", "NM-LSPG-HR")


def max_rel_error(rom, fom):
    """``max_{n >= 1} ||u~^n - u^n|| / ||u^n||``; a failed ROM run scores 1.0.

    ``rom`` is a :class:`~nmrom.lspg.RomTrajectory` or an array of states.
    """
    if getattr(rom, "failed", False):
        return 1.0
    approx = rom.decoded_states() if hasattr(rom, "decoded_states") else np.asarray(rom)
    states = fom.states if hasattr(fom, "states") else np.asarray(fom)
    if approx.shape != states.shape:
        raise DimensionError(f"ROM states {approx.shape} do not match FOM states {states.shape}")
    if states.shape[0] < 2:
        raise DimensionError("need at least one time step beyond the initial state")
    err = float(np.max(relative_errors(approx[1:], states[1:])))
    return err if np.isfinite(err) else 1.0


def timing(fn, repeat=1):
    """Median wall-clock seconds of ``repeat`` calls to ``fn`` (perf_counter)."""
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


@dataclass
class RomRunReport:
    method: str
    mu: float
    n_s: int = None
    n_r: int = None
    n_z: int = None
    max_rel_error: float = None
    wall_clock_seconds: float = 0.0
    fom_wall_clock_seconds: float = None
    gn_mean: float = None
    gn_max: int = None
    nonconverged_steps: int = 0
    failed: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def speedup(self):
        if self.fom_wall_clock_seconds is None or self.wall_clock_seconds <= 0:
            return None
        return self.fom_wall_clock_seconds / self.wall_clock_seconds

    def to_dict(self):
        out = asdict(self)
        out["speedup"] = self.speedup
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("speedup", None)
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report_from_run(traj, fom, n_r=None, n_z=None):
    """Build a report for ROM trajectory ``traj`` against FOM trajectory ``fom``."""
    iters = traj.gn_iterations
    return RomRunReport(
        method=traj.method,
        mu=float(traj.config.mu),
        n_s=int(traj.latent.shape[1]),
        n_r=n_r,
        n_z=n_z,
        max_rel_error=max_rel_error(traj, fom),
        wall_clock_seconds=traj.wall_clock_seconds,
        fom_wall_clock_seconds=fom.wall_clock_seconds,
        gn_mean=float(np.mean(iters)) if iters else None,
        gn_max=int(max(iters)) if iters else None,
        nonconverged_steps=len(traj.nonconverged_steps),
        failed=traj.failed,
    )


def fom_report(fom):
    iters = fom.newton_iterations
    return RomRunReport(
        method="FOM",
        mu=float(fom.config.mu),
        max_rel_error=0.0,
        wall_clock_seconds=fom.wall_clock_seconds,
        fom_wall_clock_seconds=fom.wall_clock_seconds,
        gn_mean=float(np.mean(iters)) if len(iters) else None,
        gn_max=int(max(iters)) if len(iters) else None,
    )
