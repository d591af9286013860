"""``nmrom`` command-line workbench.

Exit codes: 0 success, 2 configuration or dimension error, 3 numerical
failure, 4 file or format error.
"""

import argparse
import json
import logging
import os
import sys

from . import _kernels
from .autoencoder import load_model, save_model
from .errors import ConfigError, DimensionError, FormatError, NmromError, NumericalError
from .experiment import ExperimentConfig, Workbench, preset_names, write_rows
from .fom import run_fom
from .hyper import build_plan, load_plan, run_ls_lspg_hr, run_nm_lspg_hr, save_plan
from .lspg import rom_trajectory_to_snapshots, run_ls_lspg, run_nm_lspg
from .metrics import METHODS, report_from_run
from .pod import compute_basis, load_basis, save_basis
from .snapshots import (
    assemble_training_set, read_snapshots, trajectory_from_snapshots, trajectory_to_snapshots,
    write_snapshots,
)

log = logging.getLogger("nmrom")

LOSS_COLUMNS = ("epoch", "train_loss", "val_loss", "lr")


def _parse_set(text):
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(args):
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config file {args.config} does not exist")
        cfg = ExperimentConfig.from_json(args.config)
    else:
        cfg = ExperimentConfig.preset(args.preset or "desk")
    for item in args.set or []:
        cfg = cfg.override(*_parse_set(item))
    if args.output_dir:
        cfg = cfg.override("output_dir", args.output_dir)
    return cfg


def _out(cfg, path, default):
    path = path or os.path.join(cfg.output_dir, default)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    return path


def _load_foms(bench, paths):
    for path in paths or []:
        traj = trajectory_from_snapshots(read_snapshots(path))
        if traj.grid != bench.grid:
            raise DimensionError(f"{path}: grid {traj.grid.nx}x{traj.grid.ny} differs from the config grid")
        bench._foms[float(traj.config.mu)] = traj


def _model_matches(model, cfg):
    if model.n_state != cfg.grid_spec().n_state:
        raise DimensionError(f"model has N={model.n_state}, config grid needs N={cfg.grid_spec().n_state}")
    return model


# -- commands -----------------------------------------------------------------


def cmd_fom(args, cfg):
    grid = cfg.grid_spec()
    mus = args.mu if args.mu else cfg.train_mus
    for mu in mus:
        traj = run_fom(cfg.fom_config(mu), grid)
        path = _out(cfg, args.out if len(mus) == 1 else None, f"fom_mu{mu:g}.snap")
        write_snapshots(trajectory_to_snapshots(traj), path)
        print(f"fom mu={mu:g}: {traj.config.n_t} steps, {traj.wall_clock_seconds:.3f}s -> {path}")


def cmd_train(args, cfg):
    n_s = args.n_s or cfg.latent_dim
    bench = Workbench(cfg)
    _load_foms(bench, args.fom)
    losses = []
    bench_log = (lambda e, tl, vl, lr: (losses.append((e, tl, vl, lr)),
                                        log.debug("epoch %d train %.4e val %.4e lr %.1e", e, tl, vl, lr)))
    model = bench.train_model(n_s, bench_log)
    path = _out(cfg, args.out, f"model_ns{n_s}.ae")
    save_model(model, path)
    loss_path = os.path.splitext(path)[0] + "_loss.csv"
    write_rows(loss_path, LOSS_COLUMNS,
               [dict(zip(LOSS_COLUMNS, (e, float(tl), float(vl), float(lr)))) for e, tl, vl, lr in losses])
    rep = model.train_report
    print(f"train n_s={n_s}: {rep.epochs_run} epochs, best val {rep.best_val_loss:.4e} "
          f"at epoch {rep.best_epoch} ({rep.stop_reason}) -> {path}, {loss_path}")


def cmd_basis(args, cfg):
    bench = Workbench(cfg)
    _load_foms(bench, args.fom)
    data = assemble_training_set([bench.fom(mu) for mu in cfg.train_mus], cfg.ref_policy)
    basis = compute_basis(data, args.k)
    path = _out(cfg, args.out, f"basis_k{args.k}.snap")
    save_basis(basis, path)
    print(f"basis k={basis.k}, sigma_1={basis.singular_values[0]:.4e} -> {path}")


def cmd_plan(args, cfg):
    grid = cfg.grid_spec()
    basis = load_basis(args.basis) if args.basis else None
    if basis is None:
        bench = Workbench(cfg)
        _load_foms(bench, args.fom)
        basis = bench.pod(args.n_r)
    if basis.k < args.n_r:
        raise DimensionError(f"basis has {basis.k} modes, n_r={args.n_r} requested")
    model = _model_matches(load_model(args.model), cfg) if args.model else None
    plan = build_plan(basis.truncate(args.n_r), args.n_z, grid, model)
    path = _out(cfg, args.out, f"plan_r{args.n_r}_z{args.n_z}.plan")
    save_plan(plan, path)
    sub = f", subnet {plan.subnet.hidden.size} hidden units" if plan.subnet is not None else ""
    print(f"plan n_r={plan.n_r} n_z={plan.n_z}: closure {plan.closure_outputs.size} outputs{sub} -> {path}")


def cmd_rom(args, cfg):
    method = args.method
    mu = cfg.target_mu if args.mu is None else args.mu
    n_s = args.n_s or cfg.latent_dim
    grid = cfg.grid_spec()
    fom_cfg = cfg.fom_config(mu)
    gn = cfg.gn_config()
    bench = Workbench(cfg, reuse_models=True)
    _load_foms(bench, args.fom)
    fom = bench.fom(mu)
    model = _model_matches(load_model(args.model), cfg) if args.model else None
    u_ref = bench.u_ref(mu)
    if method.startswith("NM"):
        model = model or bench.model(n_s)
    else:
        basis = load_basis(args.basis).truncate(n_s) if args.basis else bench.pod(n_s)
    plan = None
    if method.endswith("-HR"):
        if args.plan:
            plan = load_plan(args.plan)
            if plan.grid != grid:
                raise DimensionError("plan grid differs from the config grid")
        else:
            if args.n_r is None or args.n_z is None:
                raise ConfigError(f"{method} needs --plan or both --n-r and --n-z")
            plan = build_plan(bench.pod(args.n_r), args.n_z, grid, model)
    if method == "NM-LSPG":
        traj = run_nm_lspg(model, grid, fom_cfg, gn)
    elif method == "LS-LSPG":
        traj = run_ls_lspg(basis, u_ref, grid, fom_cfg, gn)
    elif method == "NM-LSPG-HR":
        if plan.subnet is None:
            raise ConfigError("plan has no decoder subnet; rebuild it with --model")
        traj = run_nm_lspg_hr(model, plan, fom_cfg, gn)
    else:
        traj = run_ls_lspg_hr(basis, plan, u_ref, fom_cfg, gn)
    report = report_from_run(traj, fom, plan.n_r if plan else None, plan.n_z if plan else None)
    stem = f"{method.lower()}_mu{mu:g}_ns{n_s}"
    traj_path = _out(cfg, None, stem + ".snap")
    write_snapshots(rom_trajectory_to_snapshots(traj), traj_path)
    report_path = _out(cfg, args.out, stem + ".json")
    with open(report_path, "w") as fh:
        fh.write(report.to_json())
    speed = f"{report.speedup:.2f}x" if report.speedup else "n/a"
    print(f"{method} mu={mu:g} n_s={n_s}: max rel error {report.max_rel_error:.4e}, "
          f"{report.wall_clock_seconds:.3f}s, speedup {speed} -> {report_path}")
    if traj.failed:
        raise NumericalError(f"{method} failed: {traj.failure}")


def cmd_bench(args, cfg):
    bench = Workbench(cfg, reuse_models=args.reuse_models)
    _load_foms(bench, args.fom)
    out = bench.bench()
    paths = cfg.artifact_paths()
    for r in out["latent_sweep"] + out["hr_table"]:
        budget = f" (n_r={r.n_r}, n_z={r.n_z})" if r.n_r else ""
        print(f"{r.method:11s} n_s={r.n_s}{budget}: err {r.max_rel_error:.4e}, speedup {r.speedup or 0:.2f}")
    print(f"-> {paths['latent_sweep']}, {paths['projection']}, {paths['hr_table']}")


def cmd_sweep(args, cfg):
    if args.mus:
        cfg = cfg.override("sweep_mus", args.mus)
    bench = Workbench(cfg, reuse_models=args.reuse_models)
    _load_foms(bench, args.fom)
    rows = bench.sweep()
    for r in rows:
        print(f"mu={r['mu']:g} {r['method']:10s} err {r['max_rel_error']:.4e}")
    print(f"-> {cfg.artifact_paths()['mu_sweep']}")


def cmd_presets(args, cfg):
    for name in preset_names():
        print(name)


# -- parser -------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON file")
    common.add_argument("--preset", help=f"built-in config ({', '.join(preset_names())}); default desk")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. train.max_epochs=500 (value parsed as JSON)")
    common.add_argument("--output-dir", help="override output_dir")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="nmrom", description="Nonlinear-manifold ROM workbench for 2D Burgers")
    p.add_argument("--version", action="version", version=f"%(prog)s (kernels: {_kernels.BACKEND})")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fom", parents=[common], help="run full-order solves")
    s.add_argument("--mu", type=float, action="append", help="parameter (repeatable); default train_mus")
    s.add_argument("--out", help="output ROMSNAP1 file (single mu only)")
    s.set_defaults(func=cmd_fom)

    s = sub.add_parser("train", parents=[common], help="train a masked autoencoder")
    s.add_argument("--n-s", type=int, help="latent dimension; default latent_dim")
    s.add_argument("--fom", nargs="*", help="precomputed FOM trajectory files")
    s.add_argument("--out", help="model checkpoint path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("basis", parents=[common], help="POD basis of the training snapshots")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--fom", nargs="*")
    s.add_argument("--out")
    s.set_defaults(func=cmd_basis)

    s = sub.add_parser("plan", parents=[common], help="build a hyper-reduction plan")
    s.add_argument("--n-r", type=int, required=True)
    s.add_argument("--n-z", type=int, required=True)
    s.add_argument("--basis", help="residual basis file; default POD of the training set")
    s.add_argument("--model", help="model checkpoint; attaches the decoder subnet")
    s.add_argument("--fom", nargs="*")
    s.add_argument("--out")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("rom", parents=[common], help="run one ROM against the FOM")
    s.add_argument("--method", required=True, choices=[m for m in METHODS if m != "FOM"])
    s.add_argument("--mu", type=float)
    s.add_argument("--n-s", type=int)
    s.add_argument("--n-r", type=int)
    s.add_argument("--n-z", type=int)
    s.add_argument("--model")
    s.add_argument("--basis")
    s.add_argument("--plan")
    s.add_argument("--fom", nargs="*")
    s.add_argument("--out", help="report JSON path")
    s.set_defaults(func=cmd_rom)

    for name, func, text in (("bench", cmd_bench, "latent-dimension sweep and HR budget table"),
                             ("sweep", cmd_sweep, "error over a parameter grid")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--fom", nargs="*")
        s.add_argument("--reuse-models", action="store_true", help="load checkpoints found in output_dir")
        if name == "sweep":
            s.add_argument("--mus", type=float, nargs="+")
        s.set_defaults(func=func)

    s = sub.add_parser("presets", help="list built-in configs")
    s.set_defaults(func=cmd_presets, config=None, preset=None, set=None, output_dir=None, verbose=0)
    return p


def exit_code(exc):
    if isinstance(exc, (FormatError, OSError)):
        return 4
    if isinstance(exc, (ConfigError, DimensionError)):
        return 2
    if isinstance(exc, (NumericalError, ArithmeticError)):
        return 3
    if isinstance(exc, NmromError):
        return exc.exit_code
    if isinstance(exc, ValueError):
        return 2
    return 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args) if args.command != "presets" else None
        args.func(args, cfg)
    except (NmromError, OSError, ArithmeticError, ValueError) as exc:
        print(f"nmrom {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
