import json

import numpy as np
import pytest

from nmrom.cli import exit_code, main
from nmrom.errors import ConfigError, FormatError, NumericalError, SingularSystemError
from nmrom.experiment import HR_TABLE_COLUMNS, LATENT_SWEEP_COLUMNS, MU_SWEEP_COLUMNS, read_rows
from nmrom.lspg import rom_trajectory_from_snapshots
from nmrom.snapshots import read_snapshots, trajectory_from_snapshots

TINY = {
    "name": "tiny", "grid": [8, 8], "fom": {"n_t": 20}, "train_mus": [0.9, 1.1], "latent_dim": 3,
    "latent_dims": [3], "train": {"max_epochs": 30, "batch_size": 8}, "hr_budgets": [[6, 10]],
    "sweep_mus": [0.85, 1.0], "sweep_budget": [6, 10],
}


@pytest.fixture
def tiny(tmp_path):
    cfg = dict(TINY, output_dir=str(tmp_path / "out"))
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(cfg))
    return path, tmp_path / "out"


def test_exit_code_table():
    assert exit_code(ConfigError("x")) == 2
    assert exit_code(ValueError("x")) == 2
    assert exit_code(NumericalError("x")) == 3
    assert exit_code(SingularSystemError("x")) == 3
    assert exit_code(FormatError("x", 0)) == 4
    assert exit_code(FileNotFoundError("x")) == 4


def test_presets_command(capsys):
    assert main(["presets"]) == 0
    assert "desk" in capsys.readouterr().out.split()


def test_fom_zero_parameter(tiny):
    path, out = tiny
    assert main(["fom", "--config", str(path), "--mu", "0", "--out", str(out / "z.snap")]) == 0
    traj = trajectory_from_snapshots(read_snapshots(out / "z.snap"))
    assert traj.states.shape == (21, 72) and not np.any(traj.states)


def test_missing_config_is_io_error(tmp_path):
    assert main(["fom", "--config", str(tmp_path / "none.json")]) == 4


def test_bad_override_is_config_error(tiny):
    path, _ = tiny
    assert main(["fom", "--config", str(path), "--set", "colour=1"]) == 2
    assert main(["fom", "--config", str(path), "--set", "fom.n_t=-1"]) == 2


def test_corrupt_model_is_format_error(tiny):
    path, out = tiny
    out.mkdir()
    (out / "bad.ae").write_bytes(b"ROMAE001" + b"\0" * 5)
    assert main(["rom", "--config", str(path), "--method", "NM-LSPG", "--model", str(out / "bad.ae")]) == 4


def test_hr_without_budget_is_config_error(tiny):
    path, _ = tiny
    assert main(["rom", "--config", str(path), "--method", "LS-LSPG-HR"]) == 2


def test_pipeline(tiny, capsys):
    path, out = tiny
    cfg = ["--config", str(path)]
    assert main(["fom", *cfg]) == 0
    foms = [str(out / "fom_mu0.9.snap"), str(out / "fom_mu1.1.snap")]
    assert main(["train", *cfg, "--fom", *foms]) == 0
    assert (out / "model_ns3.ae").exists()
    loss = read_rows(out / "model_ns3_loss.csv", ("epoch", "train_loss", "val_loss", "lr"))
    assert len(loss) == 30 and loss[0]["epoch"] == 0
    assert main(["basis", *cfg, "--k", "6", "--fom", *foms]) == 0
    assert main(["plan", *cfg, "--n-r", "6", "--n-z", "10", "--basis", str(out / "basis_k6.snap"),
                 "--model", str(out / "model_ns3.ae")]) == 0
    assert main(["rom", *cfg, "--method", "NM-LSPG-HR", "--model", str(out / "model_ns3.ae"),
                 "--plan", str(out / "plan_r6_z10.plan")]) in (0, 3)
    assert main(["rom", *cfg, "--method", "LS-LSPG"]) == 0
    report = json.loads((out / "ls-lspg_mu1_ns3.json").read_text())
    assert report["speedup"] == report["fom_wall_clock_seconds"] / report["wall_clock_seconds"]
    traj = rom_trajectory_from_snapshots(read_snapshots(out / "ls-lspg_mu1_ns3.snap"))
    assert traj.latent.shape == (21, 3)

    assert main(["bench", *cfg, "--reuse-models"]) == 0
    rows = read_rows(out / "latent_sweep.csv", LATENT_SWEEP_COLUMNS)
    assert {r["method"] for r in rows} == {"LS-LSPG", "NM-LSPG"}
    hr = read_rows(out / "hr_table.csv", HR_TABLE_COLUMNS)
    assert {(r["method"], r["n_r"], r["n_z"]) for r in hr} == {("LS-LSPG-HR", 6, 10), ("NM-LSPG-HR", 6, 10)}
    for r in rows + hr:
        if r["speedup"] is not None:
            assert r["speedup"] == pytest.approx(r["fom_wall_clock_seconds"] / r["wall_clock_seconds"], rel=1e-15, abs=0)
    assert main(["sweep", *cfg, "--reuse-models"]) == 0
    sweep = read_rows(out / "mu_sweep.csv", MU_SWEEP_COLUMNS)
    assert {r["mu"] for r in sweep} == {0.85, 1.0}
    assert "NM-LSPG" in capsys.readouterr().out
