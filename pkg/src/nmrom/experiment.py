"""Experiment configuration and the FOM -> train -> ROM -> HR pipeline.

A :class:`Workbench` holds one :class:`ExperimentConfig` and memoizes every
artifact it builds (FOM trajectories, trained models, bases, plans), so a
single ``bench`` call runs end to end and repeated requests are free.
"""

import copy
import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .autoencoder import TrainConfig, init_autoencoder, load_model, nm_projection_error, save_model, train
from .errors import ConfigError
from .fom import FomConfig, GridSpec, run_fom
from .hyper import build_plan, run_ls_lspg_hr, run_nm_lspg_hr
from .lspg import GaussNewtonConfig, run_ls_lspg, run_nm_lspg
from .metrics import RomRunReport, fom_report, report_from_run
from .pod import compute_basis, ls_projection_error
from .snapshots import assemble_training_set, reference_state, split_dataset

log = logging.getLogger("nmrom")

FOM_KEYS = ("re", "t_final", "n_t", "newton_tol", "newton_max_iter")

# CSV schemas, one per emitted table
LATENT_SWEEP_COLUMNS = (
    "n_s", "method", "mu", "max_rel_error", "wall_clock_seconds", "fom_wall_clock_seconds", "speedup", "gn_mean",
)
PROJECTION_COLUMNS = ("n_s", "kind", "mu", "projection_error")
HR_TABLE_COLUMNS = (
    "method", "mu", "n_s", "n_r", "n_z", "max_rel_error", "wall_clock_seconds",
    "fom_wall_clock_seconds", "speedup", "gn_mean", "failed",
)
MU_SWEEP_COLUMNS = ("mu", "method", "n_s", "n_r", "n_z", "in_training_range", "max_rel_error", "failed")


@dataclass
class ExperimentConfig:
    """Everything one experiment needs; JSON-serializable.

    ``enc_hidden``/``dec_hidden`` of ``None`` mean ``enc_hidden_factor * N``
    and ``dec_hidden_factor * N``. ``hr_budgets`` lists ``[n_r, n_z]`` pairs.
    The hyper-reduced ``sweep`` uses ``sweep_budget`` (default: the first
    entry of ``hr_budgets``).
    """

    name: str = "experiment"
    grid: list = field(default_factory=lambda: [24, 24])
    fom: dict = field(default_factory=lambda: {"n_t": 300})
    train_mus: list = field(default_factory=lambda: [0.9, 0.95, 1.05, 1.1])
    target_mu: float = 1.0
    latent_dim: int = 5
    latent_dims: list = field(default_factory=lambda: [5])
    enc_hidden: int = None
    dec_hidden: int = None
    enc_hidden_factor: float = 1.0
    dec_hidden_factor: float = 5.0
    window: int = 10
    ref_policy: str = "initial"
    train: dict = field(default_factory=dict)
    gauss_newton: dict = field(default_factory=dict)
    hr_budgets: list = field(default_factory=lambda: [[40, 48]])
    sweep_mus: list = field(default_factory=lambda: [0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15])
    sweep_budget: list = None
    sweep_hyper: bool = True
    init_seed: int = 0
    split_seed: int = 0
    timing_repeat: int = 1
    output_dir: str = "nmrom-out"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(self.grid) != 2:
            raise ConfigError("grid must be [nx, ny]")
        unknown = set(self.fom) - set(FOM_KEYS)
        if unknown:
            raise ConfigError(f"unknown fom keys {sorted(unknown)}; allowed {list(FOM_KEYS)}")
        for name in ("train_mus", "latent_dims", "sweep_mus"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be non-empty")
        for budget in list(self.hr_budgets) + ([self.sweep_budget] if self.sweep_budget else []):
            if len(budget) != 2:
                raise ConfigError(f"HR budget {budget!r} must be [n_r, n_z]")
            if not self.latent_dim <= budget[0] <= budget[1]:
                raise ConfigError(f"HR budget {budget!r} violates n_s <= n_r <= n_z with n_s={self.latent_dim}")
        if self.timing_repeat < 1:
            raise ConfigError("timing_repeat must be >= 1")
        h_d = self.hidden_sizes()[1]
        if not 1 <= self.window <= h_d:
            raise ConfigError(f"window must be in [1, {h_d}], got {self.window}")
        # construction checks the field values
        self.grid_spec()
        self.train_config()
        self.gn_config()
        self.fom_config(self.target_mu)
        paths = list(self.artifact_paths().values())
        if len(set(paths)) != len(paths):
            raise ConfigError("artifact paths collide")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}; allowed {sorted(names)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    @classmethod
    def preset(cls, name):
        try:
            text = resources.files("nmrom.presets").joinpath(f"{name}.json").read_text()
        except FileNotFoundError as exc:
            raise ConfigError(f"unknown preset {name!r}; available {preset_names()}") from exc
        return cls.from_dict(json.loads(text))

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def override(self, key, value):
        """Copy with dotted ``key`` (``train.max_epochs``) set to ``value``."""
        d = self.to_dict()
        head, _, tail = key.partition(".")
        if head not in d:
            raise ConfigError(f"unknown config key {key!r}")
        if tail:
            if not isinstance(d[head], dict):
                raise ConfigError(f"config key {head!r} has no sub-keys")
            d[head] = dict(d[head])
            d[head][tail] = value
        else:
            d[head] = value
        return ExperimentConfig.from_dict(d)

    # derived objects

    def grid_spec(self):
        return GridSpec(*self.grid)

    def fom_config(self, mu):
        return FomConfig(mu=float(mu), **self.fom)

    def train_config(self):
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(self.train) - names
        if unknown:
            raise ConfigError(f"unknown train keys {sorted(unknown)}; allowed {sorted(names)}")
        return TrainConfig(**self.train)

    def gn_config(self):
        names = {f.name for f in dataclasses.fields(GaussNewtonConfig)}
        unknown = set(self.gauss_newton) - names
        if unknown:
            raise ConfigError(f"unknown gauss_newton keys {sorted(unknown)}; allowed {sorted(names)}")
        return GaussNewtonConfig(**self.gauss_newton)

    def hidden_sizes(self):
        n = self.grid_spec().n_state
        h_e = self.enc_hidden if self.enc_hidden is not None else round(self.enc_hidden_factor * n)
        h_d = self.dec_hidden if self.dec_hidden is not None else round(self.dec_hidden_factor * n)
        return int(h_e), int(h_d)

    def artifact_paths(self):
        out = self.output_dir
        paths = {f"model_ns{n_s}": os.path.join(out, f"model_ns{n_s}.ae") for n_s in self.all_latent_dims()}
        paths.update(
            latent_sweep=os.path.join(out, "latent_sweep.csv"),
            projection=os.path.join(out, "projection_errors.csv"),
            hr_table=os.path.join(out, "hr_table.csv"),
            mu_sweep=os.path.join(out, "mu_sweep.csv"),
            reports=os.path.join(out, "reports.json"),
        )
        return paths

    def all_latent_dims(self):
        return sorted(set(self.latent_dims) | {self.latent_dim})


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("nmrom.presets").iterdir() if p.name.endswith(".json"))


class Workbench:
    """Memoizing driver for one experiment.

    With ``reuse_models=True`` trained checkpoints already present in the
    output directory are loaded instead of retrained.
    """

    def __init__(self, cfg, reuse_models=False):
        self.cfg = cfg
        self.grid = cfg.grid_spec()
        self.gn = cfg.gn_config()
        self.reuse_models = reuse_models
        self._foms = {}
        self._models = {}
        self._basis = None
        self._plans = {}
        self._data = None

    # offline artifacts

    def fom(self, mu):
        key = float(mu)
        if key not in self._foms:
            log.info("FOM mu=%g", key)
            self._foms[key] = run_fom(self.cfg.fom_config(key), self.grid)
        return self._foms[key]

    def training_set(self):
        if self._data is None:
            trajs = [self.fom(mu) for mu in self.cfg.train_mus]
            self._data = assemble_training_set(trajs, self.cfg.ref_policy)
        return self._data

    def u_ref(self, mu):
        return reference_state(self.cfg.ref_policy, self.grid, mu)

    def model(self, n_s, progress=None):
        if n_s in self._models:
            return self._models[n_s]
        path = self.cfg.artifact_paths().get(f"model_ns{n_s}")
        if self.reuse_models and path and os.path.exists(path):
            log.info("loading %s", path)
            model = load_model(path)
        else:
            model = self.train_model(n_s, progress)
            if path:
                os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
                save_model(model, path)
        self._models[n_s] = model
        return model

    def train_model(self, n_s, progress=None):
        data = self.training_set()
        h_e, h_d = self.cfg.hidden_sizes()
        model = init_autoencoder(
            self.grid.n_state, n_s, h_e, h_d, self.cfg.window, self.cfg.init_seed, self.cfg.ref_policy
        )
        split = split_dataset(data, self.cfg.split_seed)
        log.info("training n_s=%d (h_e=%d, h_d=%d, %d columns)", n_s, h_e, h_d, data.n_cols)
        best, report = train(model, data, split, self.cfg.train_config(), log=progress)
        log.info("trained: %d epochs, best val %.3e at %d (%s)", report.epochs_run,
                 report.best_val_loss, report.best_epoch, report.stop_reason)
        best.attrs.update(grid=list(self.cfg.grid), train_mus=list(self.cfg.train_mus))
        return best

    def pod(self, k):
        """Leading ``k`` POD modes of the training deviations (one SVD, truncated)."""
        data = self.training_set()
        k_max = max(max(self.cfg.all_latent_dims()), max((b[0] for b in self.cfg.hr_budgets), default=1), k)
        if self._basis is None or self._basis.k < k:
            self._basis = compute_basis(data, min(k_max, data.n_rows, data.n_cols))
        return self._basis.truncate(k)

    def plan(self, n_r, n_z, n_s=None):
        """Plan for ``(n_r, n_z)``; with ``n_s`` the model's subnet is attached."""
        key = (n_r, n_z, n_s)
        if key not in self._plans:
            model = self.model(n_s) if n_s is not None else None
            self._plans[key] = build_plan(self.pod(n_r), n_z, self.grid, model)
        return self._plans[key]

    # online runs

    def run(self, method, mu=None, n_s=None, n_r=None, n_z=None):
        """Run one ROM and return ``(trajectory, report)``."""
        mu = self.cfg.target_mu if mu is None else float(mu)
        n_s = self.cfg.latent_dim if n_s is None else n_s
        cfg = self.cfg.fom_config(mu)
        fom = self.fom(mu)
        if method == "NM-LSPG":
            traj = run_nm_lspg(self.model(n_s), self.grid, cfg, self.gn)
        elif method == "LS-LSPG":
            traj = run_ls_lspg(self.pod(n_s), self.u_ref(mu), self.grid, cfg, self.gn)
        elif method == "NM-LSPG-HR":
            traj = run_nm_lspg_hr(self.model(n_s), self.plan(n_r, n_z, n_s), cfg, self.gn)
        elif method == "LS-LSPG-HR":
            traj = run_ls_lspg_hr(self.pod(n_s), self.plan(n_r, n_z), self.u_ref(mu), cfg, self.gn)
        else:
            raise ConfigError(f"unknown ROM method {method!r}")
        hr = method.endswith("-HR")
        report = report_from_run(traj, fom, n_r if hr else None, n_z if hr else None)
        log.info("%s mu=%g n_s=%d: err %.3e, %.2fs", method, mu, n_s, report.max_rel_error,
                 report.wall_clock_seconds)
        return traj, report

    def timed_fom(self, mu):
        """FOM wall clock (median of ``timing_repeat`` runs) in this process."""
        times = [self.fom(mu).wall_clock_seconds]
        for _ in range(self.cfg.timing_repeat - 1):
            times.append(run_fom(self.cfg.fom_config(mu), self.grid).wall_clock_seconds)
        return float(np.median(times))

    def _timed_run(self, method, mu, n_s, n_r=None, n_z=None):
        traj, report = self.run(method, mu, n_s, n_r, n_z)
        times = [report.wall_clock_seconds]
        for _ in range(self.cfg.timing_repeat - 1):
            times.append(self.run(method, mu, n_s, n_r, n_z)[1].wall_clock_seconds)
        report.wall_clock_seconds = float(np.median(times))
        return traj, report

    # experiments

    def latent_sweep(self):
        """Error versus latent dimension for both LSPG ROMs plus projection errors."""
        mu = self.cfg.target_mu
        fom = self.fom(mu)
        fom_time = self.timed_fom(mu)
        rows, proj = [], []
        for n_s in self.cfg.latent_dims:
            for method in ("LS-LSPG", "NM-LSPG"):
                _, rep = self._timed_run(method, mu, n_s)
                rep.fom_wall_clock_seconds = fom_time
                rows.append(rep)
            u_ref = self.u_ref(mu)
            proj.append({"n_s": n_s, "kind": "LS", "mu": mu,
                         "projection_error": ls_projection_error(self.pod(n_s), fom, u_ref)})
            proj.append({"n_s": n_s, "kind": "NM", "mu": mu,
                         "projection_error": nm_projection_error(self.model(n_s), fom, u_ref)})
        return rows, proj

    def hr_table(self):
        """Both HR ROMs over every ``(n_r, n_z)`` budget at ``latent_dim``."""
        mu, n_s = self.cfg.target_mu, self.cfg.latent_dim
        fom_time = self.timed_fom(mu)
        rows = []
        for n_r, n_z in self.cfg.hr_budgets:
            for method in ("NM-LSPG-HR", "LS-LSPG-HR"):
                _, rep = self._timed_run(method, mu, n_s, n_r, n_z)
                rep.fom_wall_clock_seconds = fom_time
                rows.append(rep)
        return rows

    def mu_sweep(self):
        n_s = self.cfg.latent_dim
        n_r, n_z = self.cfg.sweep_budget or self.cfg.hr_budgets[0]
        lo, hi = min(self.cfg.train_mus), max(self.cfg.train_mus)
        methods = ["NM-LSPG", "NM-LSPG-HR"] if self.cfg.sweep_hyper else ["NM-LSPG"]
        rows = []
        for mu in self.cfg.sweep_mus:
            for method in methods:
                _, rep = self.run(method, mu, n_s, n_r, n_z)
                rows.append({
                    "mu": mu, "method": method, "n_s": n_s,
                    "n_r": rep.n_r, "n_z": rep.n_z,
                    "in_training_range": lo <= mu <= hi,
                    "max_rel_error": rep.max_rel_error, "failed": rep.failed,
                })
        return rows

    def bench(self):
        """Latent sweep and HR table; writes both CSVs plus a report JSON."""
        paths = self.cfg.artifact_paths()
        os.makedirs(self.cfg.output_dir, exist_ok=True)
        latent, proj = self.latent_sweep()
        table = self.hr_table()
        write_rows(paths["latent_sweep"], LATENT_SWEEP_COLUMNS, [latent_row(r) for r in latent])
        write_rows(paths["projection"], PROJECTION_COLUMNS, proj)
        write_rows(paths["hr_table"], HR_TABLE_COLUMNS, [hr_row(r) for r in table])
        fom = fom_report(self.fom(self.cfg.target_mu))
        with open(paths["reports"], "w") as fh:
            json.dump([r.to_dict() for r in [fom] + latent + table], fh, indent=2)
        return {"latent_sweep": latent, "projection": proj, "hr_table": table}

    def sweep(self):
        os.makedirs(self.cfg.output_dir, exist_ok=True)
        rows = self.mu_sweep()
        write_rows(self.cfg.artifact_paths()["mu_sweep"], MU_SWEEP_COLUMNS, rows)
        return rows


def latent_row(r: RomRunReport):
    d = r.to_dict()
    return {k: d[k] for k in LATENT_SWEEP_COLUMNS}


def hr_row(r: RomRunReport):
    d = r.to_dict()
    return {k: d[k] for k in HR_TABLE_COLUMNS}


def write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        out.writeheader()
        for row in rows:
            out.writerow({k: _fmt(row[k]) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return "%.17g" % v
    if v is None:
        return ""
    return v


def read_rows(path, columns=None):
    """Parse a CSV written by :func:`write_rows`; numbers are converted back."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if columns is not None and tuple(reader.fieldnames or ()) != tuple(columns):
            raise ConfigError(f"{path}: columns {reader.fieldnames} differ from {list(columns)}")
        return [{k: _parse(v) for k, v in row.items()} for row in reader]


def _parse(v):
    if v == "":
        return None
    if v in ("True", "False"):
        return v == "True"
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v
