import json

import pytest

from dermfoundry.config import TASK_SCHEMAS, load_config_file, resolve_hyperparameters
from dermfoundry.core import ConfigError, RunConfig


def test_every_subcommand_has_a_schema():
    expected = {
        "pretrain", "probe", "finetune", "oof", "seg-train", "seg-predict", "seqprep",
        "change-train", "change-eval", "tbp-screen", "mil-train", "survival", "report",
    }
    assert expected <= set(TASK_SCHEMAS)


def test_layering_file_env_flags():
    env = {"DERMFOUNDRY_HP_MAX_ITER": "300", "DERMFOUNDRY_HP_TOL": "1e-6"}
    hp = resolve_hyperparameters("probe", {"max_iter": 200, "tol": 1e-3}, env, {"tol": "1e-7"})
    assert hp["max_iter"] == 300  # env beats file
    assert hp["tol"] == 1e-7  # flags beat env


def test_defaults_follow_pretrain_table():
    hp = resolve_hyperparameters("pretrain", env={})
    assert hp["learning_rate"] == 1.5e-3
    assert hp["gradient_clipping_max_norm"] == 3.0
    assert hp["crop_min_size"] == 0.4
    assert hp["align_loss_weight"] == 0.0
    assert hp["latent_alignment_loss_weight"] == 1.0


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="'learning_rat'"):
        resolve_hyperparameters("finetune", {"learning_rat": 1e-3}, env={})
    with pytest.raises(ConfigError, match="'bogus'"):
        resolve_hyperparameters("probe", env={"DERMFOUNDRY_HP_BOGUS": "1"})


def test_flag_coercion():
    hp = resolve_hyperparameters("survival", flags={"ipcw": "false", "horizons": "12,24"}, env={})
    assert hp["ipcw"] is False
    assert hp["horizons"] == "12,24"
    hp = resolve_hyperparameters("finetune", flags={"epochs": "3"}, env={})
    assert hp["epochs"] == 3


def test_config_file_must_be_object(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps([1, 2]))
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "c.json")
    assert load_config_file(None) == {}


def test_run_config_hash_ignores_output_dir():
    a = RunConfig.build("probe", seed=1, output_dir="a")
    b = RunConfig.build("probe", seed=1, output_dir="b")
    c = RunConfig.build("probe", seed=2, output_dir="a")
    assert a.hash() == b.hash() != c.hash()


def test_bad_values_named():
    with pytest.raises(ConfigError, match="'epochs'"):
        resolve_hyperparameters("finetune", flags={"epochs": "many"}, env={})
    with pytest.raises(ConfigError, match="'ipcw'"):
        resolve_hyperparameters("survival", flags={"ipcw": "maybe"}, env={})
    assert resolve_hyperparameters("survival", flags={"horizons": "40"}, env={})["horizons"] == "40"
