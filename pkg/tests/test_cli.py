"""CLI behavior: config parsing, subcommand wiring, exit codes, artifacts."""
import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

import treatcast.cli as cli
import treatcast.datastore as ds
import treatcast.gradcore as gc
import treatcast.trainer as tr

MICRO = {
    "dataset": {"t_days": 70, "n_train": 6, "n_val": 2, "n_test": 3, "gamma": 2.0,
                "seed": 5},
    "model": {"latent_dim": 4, "hidden": 3},
    "training": {"variant": "tecde", "batch_size": 32, "max_epochs": 3, "seed": 5},
}


def write_config(path, extra=None, **section_overrides):
    cfg = {k: dict(v) for k, v in MICRO.items()}
    for name, body in section_overrides.items():
        cfg.setdefault(name, {}).update(body)
    if extra:
        cfg.update(extra)
    path.write_text(yaml.safe_dump(cfg))
    return path


def run_cli(argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture()
def workdir(tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml")
    out = tmp_path / "run"
    return cfg, out


def test_simulate_prints_summary_and_saves(workdir, capsys):
    cfg, out = workdir
    assert run_cli(["simulate", "--config", cfg, "--out", out]) == 0
    text = capsys.readouterr().out
    assert "dataset: train=6 val=2 test=3 days=70 seed=5" in text
    assert "observations per patient: mean=" in text
    assert "intensity deciles:" in text and len(text.split("intensity deciles:")[1].split()) >= 9
    loaded = ds.load(out / "dataset")
    assert len(loaded.patients) == 11
    assert (out / "config_echo.yaml").exists()


def test_seed_flag_overrides_config(workdir, capsys):
    cfg, out = workdir
    assert run_cli(["simulate", "--config", cfg, "--seed", 9, "--out", out]) == 0
    assert "seed=9" in capsys.readouterr().out
    assert ds.load(out / "dataset").config.seed == 9


def test_config_echo_round_trips(workdir, capsys):
    cfg, out = workdir
    run_cli(["simulate", "--config", cfg, "--out", out])
    echo = cli.load_config(out / "config_echo.yaml")
    original = cli.load_config(cfg)
    assert cli.dataset_config(echo) == cli.dataset_config(original)
    assert cli.model_config(echo) == cli.model_config(original)
    assert cli.train_config(echo) == cli.train_config(original)
    # the echo reloads byte-identically through a second echo
    run_cli(["simulate", "--config", out / "config_echo.yaml", "--out", out])
    second = (out / "config_echo.yaml").read_text()
    run_cli(["simulate", "--config", out / "config_echo.yaml", "--out", out])
    assert (out / "config_echo.yaml").read_text() == second


def test_train_writes_checkpoint_and_history(workdir, capsys):
    cfg, out = workdir
    run_cli(["simulate", "--config", cfg, "--out", out])
    assert run_cli(["train", "--config", cfg, "--out", out]) == 0
    text = capsys.readouterr().out
    assert "variant: tecde" in text and "checkpoint:" in text
    ckpt = out / "models" / "tecde"
    trained = tr.load_trained(ckpt)
    blocks = {n.split(".")[0] for n in trained.params.names()}
    assert blocks == {"embed", "encoder_field", "decoder_field", "outcome_head"}
    assert (out / "models" / "tecde.history.csv").exists()


def test_multitask_checkpoint_has_intensity_block(workdir, capsys):
    cfg, out = workdir
    run_cli(["simulate", "--config", cfg, "--out", out])
    assert run_cli(["train", "--config", cfg, "--variant", "multitask",
                    "--out", out]) == 0
    trained = tr.load_trained(out / "models" / "multitask")
    blocks = {n.split(".")[0] for n in trained.params.names()}
    assert blocks == {"embed", "encoder_field", "decoder_field",
                      "outcome_head", "intensity_head"}


def test_same_seed_trains_identical_parameters(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.yaml")
    digests = []
    for name in ("a", "b"):
        out = tmp_path / name
        run_cli(["simulate", "--config", cfg, "--out", out])
        run_cli(["train", "--config", cfg, "--out", out])
        digests.append(gc.params_digest(tr.load_trained(out / "models" / "tecde").params))
    assert digests[0] == digests[1]


def test_evaluate_writes_metrics_json(workdir, capsys):
    cfg, out = workdir
    run_cli(["simulate", "--config", cfg, "--out", out])
    run_cli(["train", "--config", cfg, "--out", out])
    capsys.readouterr()
    assert run_cli(["evaluate", "--config", cfg, "--out", out]) == 0
    printed = json.loads(capsys.readouterr().out)
    stored = json.loads((out / "metrics_tecde.json").read_text())
    assert printed == stored
    assert stored["variant"] == "tecde"
    assert len(stored["rmse_per_tau"]) == 5
    assert stored["brier"] is None
    assert np.isfinite(stored["rmse_overall"])


def test_missing_dataset_is_io_error(workdir, capsys):
    cfg, out = workdir
    assert run_cli(["train", "--config", cfg, "--out", out]) == cli.EXIT_IO
    assert "simulate" in capsys.readouterr().err


def test_missing_checkpoint_is_io_error(workdir, capsys):
    cfg, out = workdir
    run_cli(["simulate", "--config", cfg, "--out", out])
    assert run_cli(["evaluate", "--config", cfg, "--variant", "multitask",
                    "--out", out]) == cli.EXIT_IO
    assert "no checkpoint" in capsys.readouterr().err


def test_missing_config_file_is_io_error(tmp_path, capsys):
    assert run_cli(["simulate", "--config", tmp_path / "nope.yaml",
                    "--out", tmp_path]) == cli.EXIT_IO
    assert "not found" in capsys.readouterr().err


def test_unknown_section_and_key_are_usage_errors(tmp_path, capsys):
    bad1 = tmp_path / "bad1.yaml"
    bad1.write_text("solver: {dt: 0.1}\n")
    assert run_cli(["simulate", "--config", bad1, "--out", tmp_path]) == cli.EXIT_USAGE
    assert "unknown config section 'solver'" in capsys.readouterr().err
    bad2 = tmp_path / "bad2.yaml"
    bad2.write_text("dataset: {n_patients: 5}\n")
    assert run_cli(["simulate", "--config", bad2, "--out", tmp_path]) == cli.EXIT_USAGE
    assert "unknown key 'n_patients' in config section 'dataset'" in capsys.readouterr().err


def test_invalid_yaml_and_values_are_usage_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("dataset: [1, 2\n")
    assert run_cli(["simulate", "--config", bad, "--out", tmp_path]) == cli.EXIT_USAGE
    bad.write_text("training: {variant: warp}\n")
    assert run_cli(["train", "--config", bad, "--out", tmp_path]) == cli.EXIT_USAGE
    assert "warp" in capsys.readouterr().err
    bad.write_text("dataset: {t_days: 10}\n")
    assert run_cli(["simulate", "--config", bad, "--out", tmp_path]) == cli.EXIT_USAGE


def test_usage_error_without_subcommand():
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == cli.EXIT_USAGE


def test_out_env_var_default(workdir, capsys, monkeypatch, tmp_path):
    cfg, _ = workdir
    monkeypatch.setenv("TREATCAST_OUT", str(tmp_path / "envout"))
    assert run_cli(["simulate", "--config", cfg]) == 0
    assert (tmp_path / "envout" / "dataset" / "meta.json").exists()


def test_sweep_gamma_axis_table_and_cache(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.yaml",
                       sweep={"axis": "gamma", "values": [0.0, 2.0],
                              "variants": ["tecde"], "n_seeds": 2},
                       training={"max_epochs": 2})
    out = tmp_path / "run"
    assert run_cli(["sweep", "--config", cfg, "--out", out, "--svg"]) == 0
    text = capsys.readouterr().out
    assert "sweep gamma: 4 runs" in text
    assert "axis: gamma" in text
    assert text.count("tecde:") == 2  # one table line per axis value
    svg = out / "sweep_gamma" / "plot_gamma.svg"
    assert svg.exists() and "<svg" in svg.read_text()
    with (out / "sweep_gamma" / "plot_gamma.csv").open() as fh:
        rows = fh.read().strip().splitlines()
    assert len(rows) == 3  # header + 2 axis values
    manifest = json.loads((out / "sweep_gamma" / "manifest.json").read_text())
    assert manifest["complete"] and manifest["total"] == 4
    # rerun: cache under out/runs is reused, nothing retrains
    stamps = {p: p.stat().st_mtime_ns for p in (out / "runs").glob("*.json")}
    assert len(stamps) == 4
    assert run_cli(["sweep", "--config", cfg, "--out", out]) == 0
    assert {p: p.stat().st_mtime_ns for p in (out / "runs").glob("*.json")} == stamps


def test_sweep_alpha_axis_single_variant(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.yaml",
                       sweep={"axis": "alpha", "values": [0.2, 0.8],
                              "variants": ["multitask"], "n_seeds": 1},
                       training={"variant": "multitask", "max_epochs": 2})
    out = tmp_path / "run"
    assert run_cli(["sweep", "--config", cfg, "--out", out]) == 0
    with (out / "sweep_alpha" / "plot_alpha.csv").open() as fh:
        header = fh.readline().strip().split(",")
    assert "multitask_rmse_mean" in header
    assert not any(h.startswith(("tecde", "twostep")) for h in header)


def test_sweep_axis_flag_overrides_config(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.yaml",
                       sweep={"axis": "gamma", "values": [1.0],
                              "variants": ["tecde"], "n_seeds": 1},
                       training={"max_epochs": 2})
    out = tmp_path / "run"
    assert run_cli(["sweep", "--config", cfg, "--axis", "scarcity", "--out", out]) == 0
    assert (out / "sweep_scarcity" / "plot_scarcity.csv").exists()


def test_sweep_without_axis_is_usage_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.yaml")
    assert run_cli(["sweep", "--config", cfg, "--out", tmp_path]) == cli.EXIT_USAGE
    assert "axis" in capsys.readouterr().err


def test_console_script_entry_point(tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml")
    proc = subprocess.run(
        [sys.executable, "-m", "treatcast.cli", "simulate", "--config",
         str(cfg), "--out", str(tmp_path / "run")],
        capture_output=True, text=True, timeout=300,
        env={**os.environ, "PYTHONPATH": ""},
    )
    assert proc.returncode == 0, proc.stderr
    assert "intensity deciles:" in proc.stdout
