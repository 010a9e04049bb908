"""Harness tests: config round trips, report files, determinism, CLI."""

import json

import pytest

from sflsim.cli import main
from sflsim.costmodel import DeviceProfile, LinkProfile
from sflsim.datasets import DatasetSpec
from sflsim.experiment import (
    ExperimentConfig,
    convergence_round,
    default_config,
    load_config,
    run_experiment,
    run_grid,
)
from sflsim.model_core import ModelConfig

REPORT_FILES = (
    "curves.csv",
    "memory.csv",
    "accuracy_vs_time.png",
    "f1_vs_time.png",
    "convergence_time.png",
)


@pytest.fixture
def tiny_cfg() -> ExperimentConfig:
    """Three small clients, 25 rounds; trains in well under a second."""
    return ExperimentConfig(
        model=ModelConfig(
            num_layers=3, hidden_dim=16, rank=2, input_dim=8, num_classes=3, seed=0
        ),
        devices=(
            DeviceProfile(client_id=1, capacity_flops=1e6, cut=1),
            DeviceProfile(client_id=2, capacity_flops=2e6, cut=1),
            DeviceProfile(client_id=3, capacity_flops=3e6, cut=2),
        ),
        link=LinkProfile(rate_bps=1e6),
        dataset=DatasetSpec(
            num_classes=3,
            input_dim=8,
            samples_per_client=60,
            eval_samples=120,
            dirichlet_alpha=0.5,
            class_margin=2.0,
        ),
        server_capacity_flops=1e7,
        rounds=25,
        batch_size=8,
        aggregation_interval=5,
    )


def test_config_json_round_trip():
    cfg = default_config()
    wire = json.dumps(cfg.to_json(), sort_keys=True)
    assert ExperimentConfig.from_json(json.loads(wire)) == cfg


def test_config_file_round_trip(tiny_cfg, tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_cfg.to_json()))
    assert load_config(path) == tiny_cfg


def test_config_validation(tiny_cfg):
    import dataclasses

    with pytest.raises(ValueError, match="scheduler"):
        dataclasses.replace(tiny_cfg, scheme="SL", scheduler="greedy")
    with pytest.raises(ValueError, match="scheduler"):
        dataclasses.replace(tiny_cfg, scheme="OURS", scheduler=None)
    with pytest.raises(ValueError, match="scheme"):
        dataclasses.replace(tiny_cfg, scheme="FED")
    with pytest.raises(ValueError, match="timeline"):
        dataclasses.replace(tiny_cfg, timeline_mode="exact")
    with pytest.raises(ValueError, match="num_classes"):
        dataclasses.replace(
            tiny_cfg,
            dataset=dataclasses.replace(tiny_cfg.dataset, num_classes=4, input_dim=8),
        )
    with pytest.raises(ValueError, match="rounds"):
        dataclasses.replace(tiny_cfg, rounds=0)


def test_convergence_round_flat_series():
    # constant series converges as soon as one full window exists
    assert convergence_round([0.9] * 30, window=20) == 20
    # shorter than the window: the full length is the window
    assert convergence_round([1.0, 1.0], window=20) == 2


def test_convergence_round_step_series():
    accs = [0.5] * 10 + [0.9] * 20
    # trailing-5 mean first clears 0.5% of 0.9 once the window is all 0.9
    assert convergence_round(accs, window=5) == 15


def test_convergence_round_fallback():
    # last-round jump: no trailing window qualifies, fall back to the end
    accs = [0.0] * 19 + [1.0]
    assert convergence_round(accs, window=20) == 20
    with pytest.raises(ValueError):
        convergence_round([])


def test_run_experiment_outputs(tiny_cfg, tmp_path):
    cell = run_experiment(tiny_cfg, tmp_path)
    assert cell.name == "ours-greedy"

    lines = (tmp_path / "ours-greedy" / "rounds.jsonl").read_text().splitlines()
    assert len(lines) == tiny_cfg.rounds
    rows = [json.loads(line) for line in lines]
    assert [r["round"] for r in rows] == list(range(1, tiny_cfg.rounds + 1))
    assert all(r["order"] == rows[0]["order"] for r in rows)

    summary = json.loads((tmp_path / "ours-greedy" / "summary.json").read_text())
    for key in (
        "scheme",
        "scheduler",
        "seed",
        "rounds",
        "dataset_hash",
        "final_accuracy",
        "final_macro_f1",
        "convergence_round",
        "convergence_time_s",
        "memory",
        "config",
    ):
        assert key in summary
    assert ExperimentConfig.from_json(summary["config"]) == tiny_cfg
    assert summary["memory"]["server_total_bytes"] > 0

    curves = (tmp_path / "curves.csv").read_text().splitlines()
    assert curves[0] == "scheme,scheduler,round,cum_time_s,accuracy,macro_f1,train_loss"
    assert len(curves) == 1 + tiny_cfg.rounds

    memory = (tmp_path / "memory.csv").read_text().splitlines()
    assert len(memory) == 2 and memory[1].startswith("OURS,")

    for name in REPORT_FILES:
        assert (tmp_path / name).stat().st_size > 0


def test_grid_shares_data_and_learning(tiny_cfg, tmp_path):
    cells = run_grid(tiny_cfg, tmp_path)
    assert [c.name for c in cells] == ["ours-greedy", "ours-fifo", "ours-wf", "sfl", "sl"]
    assert len({c.dataset_hash for c in cells}) == 1

    # order changes the clock, never the learned trajectory
    curves = {
        c.name: [log.eval_accuracy for log in c.result.round_logs] for c in cells
    }
    assert curves["ours-greedy"] == curves["ours-fifo"] == curves["ours-wf"]
    assert curves["ours-greedy"] == curves["sfl"]

    times = {c.name: c.result.round_logs[-1].cum_time_s for c in cells}
    assert times["ours-greedy"] < times["sfl"] < times["sl"]

    memory = (tmp_path / "memory.csv").read_text().splitlines()
    assert len(memory) == 4  # header + one row per scheme


def test_rerun_byte_identical(tiny_cfg, tmp_path):
    run_experiment(tiny_cfg, tmp_path / "a")
    run_experiment(tiny_cfg, tmp_path / "b")
    files = ["ours-greedy/rounds.jsonl", "ours-greedy/summary.json", *REPORT_FILES]
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_cli_schedule_and_oracle(capsys):
    assert main(["schedule"]) == 0
    out = capsys.readouterr().out
    assert "greedy" in out and "fifo" in out and "wf" in out

    assert main(["oracle"]) == 0
    out = capsys.readouterr().out
    assert "optimal" in out and "+0.00%" in out  # greedy is optimal here


def test_cli_run_with_config_and_overrides(tiny_cfg, tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_cfg.to_json()))

    assert main(
        ["run", "--config", str(path), "--out", str(tmp_path / "r"), "--rounds", "10"]
    ) == 0
    assert "ours-greedy" in capsys.readouterr().out
    rows = (tmp_path / "r" / "ours-greedy" / "rounds.jsonl").read_text().splitlines()
    assert len(rows) == 10

    # switching to a schedulerless scheme drops the scheduler automatically
    assert main(
        [
            "run",
            "--config",
            str(path),
            "--out",
            str(tmp_path / "sl"),
            "--rounds",
            "10",
            "--scheme",
            "SL",
        ]
    ) == 0
    capsys.readouterr()
    assert (tmp_path / "sl" / "sl" / "summary.json").exists()

    with pytest.raises(SystemExit):
        main(
            [
                "run",
                "--config",
                str(path),
                "--scheme",
                "SL",
                "--scheduler",
                "greedy",
                "--out",
                str(tmp_path / "bad"),
            ]
        )
    capsys.readouterr()


def test_cli_env_config_fallback(tiny_cfg, tmp_path, monkeypatch, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_cfg.to_json()))
    monkeypatch.setenv("SFLSIM_CONFIG", str(path))
    assert main(["schedule"]) == 0
    out = capsys.readouterr().out
    assert "[1, 3, 2]" in out or "[1," in out  # three-client order, not the default six
