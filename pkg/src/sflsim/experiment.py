"""Experiment harness: configuration, grid driver, and report files.

An experiment is one (scheme, scheduler) cell trained on a synthetic
non-IID classification task; a grid is the five-cell sweep

    OURS x {greedy, fifo, wf},  SFL,  SL

run on the SAME shards and eval split (verified by content hash). Every
cell writes ``rounds.jsonl`` and ``summary.json`` into its own
subdirectory; the report root gets ``curves.csv`` (time vs accuracy vs
macro-F1 per cell), ``memory.csv`` (modeled server/client bytes per
scheme), and rendered figures.

All files are written atomically, carry no timestamps, and serialize
floats via repr, so identical (config, seed) reruns are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from sflsim.costmodel import (
    SCHEMES,
    DeviceProfile,
    LinkProfile,
    MemoryReport,
    reference_devices,
)
from sflsim.datasets import DatasetSpec, Shard, dataset_hash, generate_dataset
from sflsim.metrics import evaluate
from sflsim.model_core import ModelConfig, init_model
from sflsim.scheduler import SCHEDULER_POLICIES
from sflsim.sim_engine import TIMELINE_MODES, TrainingResult, run_training

__all__ = [
    "ExperimentConfig",
    "CellResult",
    "GRID_CELLS",
    "default_config",
    "load_config",
    "convergence_round",
    "run_cell",
    "run_experiment",
    "run_grid",
    "write_report",
]

# the five report cells, in presentation order
GRID_CELLS = (
    ("OURS", "greedy"),
    ("OURS", "fifo"),
    ("OURS", "wf"),
    ("SFL", None),
    ("SL", None),
)

CONVERGENCE_WINDOW = 20
CONVERGENCE_REL_TOL = 0.005


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines one training cell, JSON round-trippable."""

    model: ModelConfig
    devices: tuple[DeviceProfile, ...]
    link: LinkProfile
    dataset: DatasetSpec
    server_capacity_flops: float
    scheme: str = "OURS"
    scheduler: str | None = "greedy"
    rounds: int = 300
    batch_size: int = 16
    learning_rate: float = 0.05
    aggregation_interval: int = 5
    seed: int = 0
    timeline_mode: str = "event_driven"
    reschedule_each_round: bool = False

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}, expected {SCHEMES}")
        if self.scheme == "OURS":
            if self.scheduler not in SCHEDULER_POLICIES:
                raise ValueError(
                    f"scheme OURS needs a scheduler from {SCHEDULER_POLICIES}, "
                    f"got {self.scheduler!r}"
                )
        elif self.scheduler is not None:
            raise ValueError(f"scheme {self.scheme} takes no scheduler")
        if self.timeline_mode not in TIMELINE_MODES:
            raise ValueError(f"unknown timeline mode {self.timeline_mode!r}")
        if not self.devices:
            raise ValueError("at least one device required")
        if self.model.num_classes != self.dataset.num_classes:
            raise ValueError("model and dataset disagree on num_classes")
        if self.model.input_dim != self.dataset.input_dim:
            raise ValueError("model and dataset disagree on input_dim")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")

    def to_json(self) -> dict:
        return {
            "model": asdict(self.model),
            "devices": [asdict(d) for d in self.devices],
            "link": asdict(self.link),
            "dataset": asdict(self.dataset),
            "server_capacity_flops": self.server_capacity_flops,
            "scheme": self.scheme,
            "scheduler": self.scheduler,
            "rounds": self.rounds,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "aggregation_interval": self.aggregation_interval,
            "seed": self.seed,
            "timeline_mode": self.timeline_mode,
            "reschedule_each_round": self.reschedule_each_round,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentConfig":
        return cls(
            model=ModelConfig(**data["model"]),
            devices=tuple(DeviceProfile(**d) for d in data["devices"]),
            link=LinkProfile(**data["link"]),
            dataset=DatasetSpec(**data["dataset"]),
            server_capacity_flops=data["server_capacity_flops"],
            scheme=data.get("scheme", "OURS"),
            scheduler=data.get("scheduler", "greedy"),
            rounds=data.get("rounds", 300),
            batch_size=data.get("batch_size", 16),
            learning_rate=data.get("learning_rate", 0.05),
            aggregation_interval=data.get("aggregation_interval", 5),
            seed=data.get("seed", 0),
            timeline_mode=data.get("timeline_mode", "event_driven"),
            reschedule_each_round=data.get("reschedule_each_round", False),
        )

    def cell(self, scheme: str, scheduler: str | None) -> "ExperimentConfig":
        return replace(self, scheme=scheme, scheduler=scheduler)


def default_config() -> ExperimentConfig:
    """The desk-scale default: six-SoC testbed shrunk to ~1e6 FLOP/s.

    Capacities keep the published TFLOPS ratios; the server and link are
    sized so one global step costs tenths of a simulated second and the
    server leg stays a small fraction of a step, matching the regime the
    full-size testbed operates in. 300 rounds train past convergence in a
    couple of seconds of real time.
    """
    return ExperimentConfig(
        model=ModelConfig(
            num_layers=6, hidden_dim=32, rank=4, input_dim=16, num_classes=4, seed=0
        ),
        devices=tuple(reference_devices(capacity_scale=1e6)),
        link=LinkProfile(rate_bps=1e6),
        dataset=DatasetSpec(
            num_classes=4,
            input_dim=16,
            samples_per_client=200,
            eval_samples=800,
            dirichlet_alpha=0.5,
            class_margin=2.0,
        ),
        server_capacity_flops=2.2e7,
        scheme="OURS",
        scheduler="greedy",
        rounds=300,
        batch_size=16,
        learning_rate=0.05,
        aggregation_interval=5,
        seed=0,
        timeline_mode="event_driven",
    )


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return ExperimentConfig.from_json(json.load(fh))


def convergence_round(
    accuracies: Sequence[float],
    window: int = CONVERGENCE_WINDOW,
    rel_tol: float = CONVERGENCE_REL_TOL,
) -> int:
    """First round whose trailing-window mean accuracy is within
    ``rel_tol`` (relative) of the run's final value.

    Rounds are 1-based. Series shorter than the window use their full
    length as the window; if no prefix qualifies the last round is
    returned.
    """
    if not accuracies:
        raise ValueError("empty accuracy series")
    final = accuracies[-1]
    tol = rel_tol * abs(final)
    n = len(accuracies)
    w = min(window, n)
    for t in range(w, n + 1):
        if abs(float(np.mean(accuracies[t - w : t])) - final) <= tol:
            return t
    return n


@dataclass
class CellResult:
    """One trained cell plus its derived report quantities."""

    name: str
    config: ExperimentConfig
    result: TrainingResult
    dataset_hash: str
    convergence_round: int
    convergence_time_s: float

    @property
    def memory(self) -> MemoryReport:
        assert self.result.memory is not None
        return self.result.memory

    def summary(self) -> dict:
        logs = self.result.round_logs
        last = logs[-1]
        return {
            "cell": self.name,
            "scheme": self.config.scheme,
            "scheduler": self.config.scheduler,
            "seed": self.config.seed,
            "rounds": self.config.rounds,
            "order": list(self.result.order),
            "dataset_hash": self.dataset_hash,
            "final_accuracy": last.eval_accuracy,
            "final_macro_f1": last.eval_macro_f1,
            "final_train_loss": last.train_loss,
            "convergence_round": self.convergence_round,
            "convergence_time_s": self.convergence_time_s,
            "total_time_s": last.cum_time_s,
            "round_makespan_s": logs[0].makespan_s,
            "memory": self.memory.to_json(),
            "timings": [t.to_json() for t in self.result.timings],
            "config": self.config.to_json(),
        }


def cell_name(scheme: str, scheduler: str | None) -> str:
    return scheme.lower() + (f"-{scheduler}" if scheduler else "")


def run_cell(
    config: ExperimentConfig,
    shards: list[Shard] | None = None,
    eval_split: Shard | None = None,
) -> CellResult:
    """Train one cell; generates the dataset unless shards are supplied."""
    if (shards is None) != (eval_split is None):
        raise ValueError("pass both shards and eval_split, or neither")
    if shards is None:
        shards, eval_split = generate_dataset(
            config.dataset, len(config.devices), config.seed
        )
    assert eval_split is not None
    stack, _ = init_model(config.model)

    def eval_fn(adapters):
        return evaluate(stack, adapters, eval_split)

    result = run_training(
        model_cfg=config.model,
        devices=config.devices,
        link=config.link,
        server_capacity_flops=config.server_capacity_flops,
        shards=shards,
        scheme=config.scheme,
        scheduler=config.scheduler,
        rounds=config.rounds,
        lr=config.learning_rate,
        batch=config.batch_size,
        aggregation_interval=config.aggregation_interval,
        seed=config.seed,
        timeline_mode=config.timeline_mode,
        reschedule_each_round=config.reschedule_each_round,
        eval_fn=eval_fn,
    )
    accs = [log.eval_accuracy for log in result.round_logs]
    conv = convergence_round(accs)
    return CellResult(
        name=cell_name(config.scheme, config.scheduler),
        config=config,
        result=result,
        dataset_hash=dataset_hash(shards, eval_split),
        convergence_round=conv,
        convergence_time_s=result.round_logs[conv - 1].cum_time_s,
    )


def run_experiment(config: ExperimentConfig, out_dir: str | os.PathLike) -> CellResult:
    """Train the configured cell and write its full report under out_dir."""
    cell = run_cell(config)
    write_report([cell], out_dir)
    return cell


def run_grid(config: ExperimentConfig, out_dir: str | os.PathLike) -> list[CellResult]:
    """Five-cell scheme/scheduler sweep on one shared dataset."""
    shards, eval_split = generate_dataset(
        config.dataset, len(config.devices), config.seed
    )
    cells = [
        run_cell(config.cell(scheme, sched), shards, eval_split)
        for scheme, sched in GRID_CELLS
    ]
    hashes = {c.dataset_hash for c in cells}
    if len(hashes) != 1:  # all cells must see the same bytes
        raise RuntimeError(f"dataset hash diverged across cells: {sorted(hashes)}")
    write_report(cells, out_dir)
    return cells


def _atomic_write(path: Path, data: str | bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    mode, enc = ("wb", None) if isinstance(data, bytes) else ("w", "utf-8")
    with open(tmp, mode, encoding=enc) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_report(cells: Sequence[CellResult], out_dir: str | os.PathLike) -> dict:
    """Write per-cell rounds.jsonl + summary.json, the two CSVs, and figures.

    Returns a name -> path map of everything written.
    """
    from sflsim.plots import render_figures  # deferred: pulls in matplotlib

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    for cell in cells:
        cdir = root / cell.name
        cdir.mkdir(parents=True, exist_ok=True)
        lines = [_dumps(log.to_json()) for log in cell.result.round_logs]
        _atomic_write(cdir / "rounds.jsonl", "\n".join(lines) + "\n")
        _atomic_write(cdir / "summary.json", _dumps(cell.summary()) + "\n")
        paths[f"{cell.name}/rounds.jsonl"] = cdir / "rounds.jsonl"
        paths[f"{cell.name}/summary.json"] = cdir / "summary.json"

    _atomic_write(root / "curves.csv", _curves_csv(cells))
    _atomic_write(root / "memory.csv", _memory_csv(cells))
    paths["curves.csv"] = root / "curves.csv"
    paths["memory.csv"] = root / "memory.csv"
    paths.update(render_figures(cells, root))
    return paths


def _curves_csv(cells: Sequence[CellResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["scheme", "scheduler", "round", "cum_time_s", "accuracy", "macro_f1", "train_loss"]
    )
    for cell in cells:
        sched = cell.config.scheduler or ""
        for log in cell.result.round_logs:
            writer.writerow(
                [
                    cell.config.scheme,
                    sched,
                    log.round,
                    repr(log.cum_time_s),
                    repr(log.eval_accuracy),
                    repr(log.eval_macro_f1),
                    repr(log.train_loss),
                ]
            )
    return buf.getvalue()


def _memory_csv(cells: Sequence[CellResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        [
            "scheme",
            "server_total_bytes",
            "server_frozen_bytes",
            "server_adapter_bytes",
            "server_activation_bytes",
            "server_gradient_bytes",
            "client_total_bytes",
            "client_max_bytes",
        ]
    )
    seen: set[str] = set()
    for cell in cells:
        if cell.config.scheme in seen:  # memory depends on the scheme only
            continue
        seen.add(cell.config.scheme)
        rep = cell.memory
        writer.writerow(
            [
                rep.scheme,
                rep.server_total_bytes,
                rep.server_frozen_bytes,
                rep.server_adapter_bytes,
                rep.server_activation_bytes,
                rep.server_gradient_bytes,
                sum(rep.client_bytes.values()),
                max(rep.client_bytes.values()),
            ]
        )
    return buf.getvalue()
