import json
import os
import shlex
import subprocess
import sys

import pytest

from batchrl.cli import main

SMALL_CONFIG = """\
env = lq1d
num_envs = 3
total_env_steps = 600
train_steps = 300
eval_episodes = 3
hidden = 8,8
episodes_per_update = 3
update_epochs = 2
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CONFIG)
    return path


def test_train_happy_path(tmp_path, config_file, capsys):
    out = tmp_path / "out"
    code = main(["train", "--config", str(config_file), "--env", "lq1d", "--num-envs", "3",
                 "--seed", "1", "--logdir", str(out)])
    assert code == 0
    assert sorted(os.listdir(out)) == ["checkpoint.brlc", "config.txt", "curve.csv", "updates.csv"]
    assert "final eval return" in capsys.readouterr().out


def test_flags_override_config(tmp_path, config_file):
    out = tmp_path / "out"
    assert main(["train", "--config", str(config_file), "--num-envs", "2", "--logdir", str(out)]) == 0
    text = (out / "config.txt").read_text()
    assert "num_envs = 2" in text and "hidden = 8,8" in text


def test_logdir_from_environment(tmp_path, config_file, monkeypatch):
    monkeypatch.setenv("BATCHRL_LOGDIR", str(tmp_path / "envdir"))
    assert main(["train", "--config", str(config_file)]) == 0
    assert (tmp_path / "envdir" / "curve.csv").exists()


def test_unknown_env_is_usage_error(capsys):
    assert main(["train", "--env", "nosuch", "--logdir", "x"]) == 2
    err = capsys.readouterr().err
    assert "lq1d" in err and "pendulum" in err


def test_unknown_env_in_config(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("env = nosuch\n")
    assert main(["train", "--config", str(cfg), "--logdir", str(tmp_path / "o")]) == 2
    assert "registered: lq1d, pendulum" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train", "--bogus"], ["inspect-checkpoint"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path, capsys):
    assert main(["inspect-checkpoint", str(tmp_path / "missing.brlc")]) == 1


def test_eval_and_inspect(tmp_path, config_file, capsys):
    out = tmp_path / "out"
    assert main(["train", "--config", str(config_file), "--logdir", str(out)]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", str(config_file), "--logdir", str(out), "--episodes", "5"]) == 0
    line = capsys.readouterr().out
    assert line.startswith("episodes 5") and "median" in line
    assert main(["inspect-checkpoint", str(out / "checkpoint.brlc")]) == 0
    listing = capsys.readouterr().out
    assert "policy/w0" in listing and "8x1" in listing and "policy/log_std" in listing


def test_train_writes_only_inside_logdir(tmp_path, config_file, monkeypatch):
    monkeypatch.chdir(tmp_path)
    before = set(os.listdir(tmp_path))
    assert main(["train", "--config", str(config_file), "--logdir", "inside"]) == 0
    assert set(os.listdir(tmp_path)) - before == {"inside"}


def test_bench_env_parallel_beats_serial(capsys):
    worker = shlex.join([sys.executable, "-m", "batchrl.ipc.worker", "--delay-ms", "2"])
    code = main(["bench-env", "--env", "pendulum", "--num-envs", "8", "--steps", "40",
                 "--worker-command", worker, "--json"])
    assert code == 0
    result = json.loads(capsys.readouterr().out)
    assert result["external_parallel"] > result["external_serial"]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "batchrl", "train", "--env", "nosuch"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
