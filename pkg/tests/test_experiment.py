import json
import time

import numpy as np
import pytest

from nmrom.errors import ConfigError, DimensionError
from nmrom.experiment import (
    HR_TABLE_COLUMNS,
    ExperimentConfig,
    preset_names,
    read_rows,
    write_rows,
)
from nmrom.metrics import RomRunReport, max_rel_error, timing


# -- metrics ------------------------------------------------------------------


def test_max_rel_error_skips_initial_state():
    fom = np.array([[1.0, 0.0], [2.0, 0.0], [4.0, 0.0]])
    rom = fom.copy()
    rom[0] = 100.0
    rom[2, 1] = 0.4
    assert max_rel_error(rom, fom) == pytest.approx(0.1)


def test_failed_run_scores_one():
    class Failed:
        failed = True

    assert max_rel_error(Failed(), np.ones((3, 2))) == 1.0
    assert max_rel_error(np.full((3, 2), np.nan), np.ones((3, 2))) == 1.0


def test_max_rel_error_shape_check():
    with pytest.raises(DimensionError):
        max_rel_error(np.ones((3, 2)), np.ones((4, 2)))


def test_timing_noop_is_fast():
    assert timing(lambda: None, 5) < 1e-3


def test_timing_median_stable():
    work = lambda: time.sleep(0.01)
    a, b = timing(work, 5), timing(work, 5)
    assert abs(a - b) / max(a, b) <= 0.2


def test_report_speedup_and_round_trip():
    r = RomRunReport("NM-LSPG-HR", 1.0, 5, 55, 58, 0.01, 0.25, 3.0)
    assert r.speedup == 3.0 / 0.25
    d = json.loads(r.to_json())
    assert d["speedup"] == d["fom_wall_clock_seconds"] / d["wall_clock_seconds"]
    assert RomRunReport.from_dict(d) == r
    with pytest.raises(ValueError):
        RomRunReport("POD", 1.0)


# -- CSV ----------------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    rows = [
        {"method": "NM-LSPG-HR", "mu": 1.0, "n_s": 5, "n_r": 20, "n_z": 24, "max_rel_error": 0.1 / 3,
         "wall_clock_seconds": 1e-3, "fom_wall_clock_seconds": 2.5, "speedup": 2500.0, "gn_mean": 2.5,
         "gn_max": 4, "nonconverged_steps": 0, "failed": False},
        {"method": "LS-LSPG-HR", "mu": 1.0, "n_s": 5, "n_r": 20, "n_z": 24, "max_rel_error": None,
         "wall_clock_seconds": 1e-3, "fom_wall_clock_seconds": None, "speedup": None, "gn_mean": None,
         "gn_max": None, "nonconverged_steps": 3, "failed": True},
    ]
    path = tmp_path / "t.csv"
    write_rows(path, HR_TABLE_COLUMNS, rows)
    back = read_rows(path, HR_TABLE_COLUMNS)
    assert back == [{k: r.get(k) for k in HR_TABLE_COLUMNS} for r in rows]


def test_csv_header_checked(tmp_path):
    path = tmp_path / "t.csv"
    write_rows(path, ("a", "b"), [{"a": 1, "b": 2}])
    with pytest.raises(Exception):
        read_rows(path, ("a", "c"))


# -- config -------------------------------------------------------------------


def test_presets_load_and_validate():
    assert {"desk", "paper"} <= set(preset_names())
    desk = ExperimentConfig.preset("desk")
    assert desk.grid_spec().n_state == 968
    assert desk.hidden_sizes() == (968, 5 * 968)
    assert desk.window == 10 and desk.latent_dim == 5
    assert desk.train_mus == [0.9, 0.95, 1.05, 1.1]
    paper = ExperimentConfig.preset("paper")
    assert paper.hidden_sizes() == (6728, 33730)
    assert paper.fom_config(1.0).dt == pytest.approx(2 / 1500)


def test_config_round_trip_and_override(tmp_path):
    cfg = ExperimentConfig.preset("desk")
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert ExperimentConfig.from_json(path) == cfg
    new = cfg.override("train.max_epochs", 7)
    assert new.train_config().max_epochs == 7 and cfg.train_config().max_epochs != 7


@pytest.mark.parametrize("key,value", [
    ("hr_budgets", [[3, 2]]),
    ("hr_budgets", [[4, 6]]),  # n_s = 5 > n_r
    ("train_mus", []),
    ("window", 0),
])
def test_config_rejects_bad_values(key, value):
    with pytest.raises((ConfigError, DimensionError)):
        ExperimentConfig.preset("desk").override(key, value)


def test_config_rejects_unknown_key():
    d = ExperimentConfig.preset("desk").to_dict()
    d["colour"] = "red"
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)
