import filecmp
import json
import os

import pytest

from latentloop.cli import main, read_config_file, resolve_config, ConfigError


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Small end-to-end run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    d = str(root)
    assert main(["build-data", "--out", f"{d}/data", "--seed", "7",
                 "--set", "count=60", "--set", "budget=4"]) == 0
    assert main(["pca-fit", "--out", f"{d}/pca",
                 "--set", f"samples={d}/data/targets.bin",
                 "--set", "k=16"]) == 0
    assert main(["train", "--out", f"{d}/train", "--seed", "3",
                 "--set", f"dataset={d}/data/dataset.bin",
                 "--set", f"basis={d}/pca/basis.bin",
                 "--set", "epochs=1"]) == 0
    return d


def test_unknown_command_exits_2(capsys):
    assert main(["frobnicate", "--out", "/tmp/x"]) == 2
    assert "unknown command" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    code = main(["build-data", "--out", str(tmp_path / "o"),
                 "--set", "bogus_key=1"])
    assert code == 2
    assert "bogus_key" in capsys.readouterr().err


def test_non_square_budget_exits_2(tmp_path, capsys):
    code = main(["build-data", "--out", str(tmp_path / "o"),
                 "--set", "budget=5"])
    assert code == 2
    assert "perfect square" in capsys.readouterr().err


def test_missing_input_exits_1(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path / "o"),
                 "--set", "dataset=/nonexistent", "--set", "basis=/nonexistent"])
    assert code == 1


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\ncount = 12\nbudget=9\n\n")
    parsed = read_config_file(cfg)
    assert parsed == {"count": 12, "budget": 9}
    with pytest.raises(ConfigError):
        resolve_config({"count": 1}, None, ["count"])
    with pytest.raises(ConfigError):
        resolve_config({"count": 1}, cfg, [])


def test_run_dir_records_resolved_config(pipeline):
    text = open(f"{pipeline}/data/config.txt").read()
    assert "count=60" in text
    assert "seed=7" in text


def test_pca_fit_report(pipeline):
    report = json.load(open(f"{pipeline}/pca/fit_report.json"))
    assert report["k"] == 16
    assert 0.0 <= report["relmse"] <= 1.0


def test_train_artifacts(pipeline):
    assert os.path.exists(f"{pipeline}/train/checkpoint.bin")
    log = open(f"{pipeline}/train/training_log.csv").read()
    assert log.startswith("step,lm_loss,latent_loss,total,lr")


def test_profile_and_intervene_and_audit(pipeline, tmp_path):
    d = pipeline
    assert main(["profile-norms", "--out", f"{d}/norms",
                 "--set", f"checkpoint={d}/train/checkpoint.bin",
                 "--set", f"dataset={d}/data/dataset.bin",
                 "--set", "max_examples=4"]) == 0
    report = json.load(open(f"{d}/norms/accumulation.json"))
    assert report["per_step_identity_max_err"] < 1e-9
    assert main(["intervene", "--out", f"{d}/int",
                 "--set", f"checkpoint={d}/train/checkpoint.bin",
                 "--set", f"dataset={d}/data/dataset.bin",
                 "--set", f"basis={d}/pca/basis.bin",
                 "--set", "mode=zero_latent", "--set", "max_examples=4"]) == 0
    acc = json.load(open(f"{d}/int/accuracy.json"))
    assert acc["n_examples"] == 4
    assert main(["audit", "--out", f"{d}/audit",
                 "--set", f"train_dataset={d}/data/dataset.bin",
                 "--set", f"eval_dataset={d}/data/dataset.bin"]) == 0
    audit = json.load(open(f"{d}/audit/audit.json"))
    assert len(audit["image_collisions"]) > 0  # self-comparison collides fully


def test_rerun_is_bitwise_identical_across_workers(pipeline):
    d = pipeline
    assert main(["train", "--out", f"{d}/train_w4", "--seed", "3",
                 "--workers", "4",
                 "--set", f"dataset={d}/data/dataset.bin",
                 "--set", f"basis={d}/pca/basis.bin",
                 "--set", "epochs=1"]) == 0
    assert filecmp.cmp(f"{d}/train/checkpoint.bin",
                       f"{d}/train_w4/checkpoint.bin", shallow=False)
    assert filecmp.cmp(f"{d}/train/training_log.csv",
                       f"{d}/train_w4/training_log.csv", shallow=False)


def test_invalid_workers_exits_2(tmp_path):
    assert main(["build-data", "--out", str(tmp_path / "o"),
                 "--workers", "0"]) == 2
