"""Round-by-round training engine for the three deployment schemes.

One global round works like the deployed protocol:

1. every client draws a minibatch from its own seeded stream and runs its
   lower segment, producing boundary activations;
2. the server runs the upper segment for one client after another in the
   scheduled order against a single shared frozen stack, switching only the
   per-client adapters, updating them, and returning boundary gradients;
3. every client finishes its backward pass and updates its own adapters.

Every ``aggregation_interval`` rounds the per-client adapter sets (both
sides) are averaged into one global set that re-seeds everyone.

Numerically the three schemes relate as follows. OURS and SFL run the exact
same learning computation; they differ only in the simulated clock (pipeline
with a sequential server vs. concurrent per-client server jobs under
processor sharing) and in the memory report. SL is a genuinely different
algorithm: one adapter set migrates through the clients round-robin, one
minibatch step per visit, with no aggregation.

Client updates within a round are mutually independent, so the server's
processing order never changes the learned state, only the clock. Tests
assert this bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from sflsim.costmodel import (
    DeviceProfile,
    LinkProfile,
    MemoryReport,
    StepTiming,
    arrival_times,
    event_driven_makespan,
    memory_footprint,
    shared_server_makespan,
    step_makespan,
    time_components,
)
from sflsim.federation import ClientAdapterView, aggregate, split_adapters
from sflsim.model_core import (
    FrozenStack,
    LoraAdapter,
    ModelConfig,
    backward_partial,
    forward_partial,
    init_model,
    loss_and_metrics,
    sgd_step,
)
from sflsim.scheduler import make_order

__all__ = [
    "ClientState",
    "ServerState",
    "RoundLog",
    "TrainingResult",
    "run_round",
    "aggregate_round",
    "simulate_timeline",
    "run_training",
]

TIMELINE_MODES = ("analytic", "event_driven")

EvalFn = Callable[[list[LoraAdapter]], tuple[float, float]]


@dataclass
class ClientState:
    """One participating device: its shard, stream, and lower adapters."""

    device: DeviceProfile
    shard_x: np.ndarray
    shard_y: np.ndarray
    rng: np.random.Generator
    adapters: list[LoraAdapter]

    @property
    def client_id(self) -> int:
        return self.device.client_id

    @property
    def data_size(self) -> int:
        return int(self.shard_y.shape[0])


@dataclass
class ServerState:
    """The single shared backbone plus per-client upper adapter sets.

    ``live_caches``/``peak_live_caches`` instrument the invariant that the
    sequential server keeps at most one client's activation cache alive.
    """

    stack: FrozenStack
    adapters: dict[int, list[LoraAdapter]]
    frozen_stacks: int = 1
    live_caches: int = 0
    peak_live_caches: int = 0

    def cache_acquired(self) -> None:
        self.live_caches += 1
        self.peak_live_caches = max(self.peak_live_caches, self.live_caches)

    def cache_released(self) -> None:
        self.live_caches -= 1


@dataclass
class RoundLog:
    round: int
    makespan_s: float
    cum_time_s: float
    train_loss: float
    train_accuracy: float
    eval_accuracy: float | None
    eval_macro_f1: float | None
    aggregated: bool
    order: list[int]

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "makespan_s": self.makespan_s,
            "cum_time_s": self.cum_time_s,
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "eval_accuracy": self.eval_accuracy,
            "eval_macro_f1": self.eval_macro_f1,
            "aggregated": self.aggregated,
            "order": list(self.order),
        }


@dataclass
class TrainingResult:
    scheme: str
    scheduler: str | None
    order: list[int]
    round_logs: list[RoundLog] = field(default_factory=list)
    final_adapters: list[LoraAdapter] = field(default_factory=list)
    timings: list[StepTiming] = field(default_factory=list)
    memory: MemoryReport | None = None
    server_state: ServerState | None = None


def run_round(
    clients: Sequence[ClientState],
    server: ServerState,
    order: Sequence[int],
    lr: float,
    batch: int,
) -> tuple[float, float]:
    """One split step for every client; returns (mean loss, train accuracy).

    The learned state after this call does not depend on ``order``; the
    order matters only to the wall-clock simulation.
    """
    n_stages = server.stack.num_layers + 2
    cmap = {c.client_id: c for c in clients}
    if sorted(order) != sorted(cmap):
        raise ValueError(f"order {list(order)} does not cover all clients")

    # client forward phase (parallel on real hardware)
    uplinks: dict[int, tuple] = {}
    for cid in sorted(cmap):
        c = cmap[cid]
        idx = c.rng.integers(0, c.data_size, size=batch)
        x, y = c.shard_x[idx], c.shard_y[idx]
        lo_cache = forward_partial(server.stack, c.adapters, 0, c.device.cut + 1, x)
        uplinks[cid] = (lo_cache, y)

    # sequential server phase, one live cache at a time
    downlinks: dict[int, np.ndarray] = {}
    losses: dict[int, float] = {}
    correct = 0
    for cid in order:
        c = cmap[cid]
        lo_cache, y = uplinks[cid]
        server.cache_acquired()
        hi_cache = forward_partial(
            server.stack,
            server.adapters[cid],
            c.device.cut + 1,
            n_stages,
            lo_cache.output,
        )
        loss, ok = loss_and_metrics(hi_cache.logits, y)
        grads = backward_partial(
            server.stack, server.adapters[cid], hi_cache, labels=y
        )
        sgd_step(server.adapters[cid], grads, lr)
        server.cache_released()
        downlinks[cid] = grads.input_grad
        losses[cid] = loss
        correct += ok

    # client backward phase (parallel on real hardware)
    for cid in sorted(cmap):
        c = cmap[cid]
        lo_cache, _ = uplinks[cid]
        lo_grads = backward_partial(
            server.stack, c.adapters, lo_cache, upstream=downlinks[cid]
        )
        sgd_step(c.adapters, lo_grads, lr)

    mean_loss = float(np.mean([losses[cid] for cid in sorted(losses)]))
    return mean_loss, correct / (batch * len(clients))


def _views(clients: Sequence[ClientState], server: ServerState) -> list[ClientAdapterView]:
    return [
        ClientAdapterView(
            client_id=c.client_id,
            cut=c.device.cut,
            client_side=c.adapters,
            server_side=server.adapters[c.client_id],
            data_size=c.data_size,
        )
        for c in clients
    ]


def aggregate_round(clients: Sequence[ClientState], server: ServerState) -> list[LoraAdapter]:
    """Average all per-client sets and re-seed both sides from the result."""
    merged = aggregate(_views(clients, server))
    for c in clients:
        lo, hi = split_adapters(merged, c.device.cut)
        c.adapters = lo
        server.adapters[c.client_id] = hi
    return merged


def simulate_timeline(
    order: Sequence[int],
    timings: Sequence[StepTiming],
    arrivals: dict[int, float] | None = None,
    mode: str = "event_driven",
) -> tuple[float, dict[int, float]]:
    """Makespan of one round under the chosen queue model.

    ``analytic`` charges every client the full six-component sum with a
    prefix-sum wait (arrivals ignored); ``event_driven`` starts each server
    job at max(arrival, server free). The two agree when all arrivals are
    zero.
    """
    if mode == "analytic":
        makespan, filled = step_makespan(order, timings)
        return makespan, {t.client_id: t.total for t in filled}
    if mode == "event_driven":
        return event_driven_makespan(order, timings, arrivals)
    raise ValueError(f"unknown timeline mode {mode!r}, expected {TIMELINE_MODES}")


def _round_clock(
    scheme: str,
    order: Sequence[int],
    timings: Sequence[StepTiming],
    arrivals: dict[int, float],
    mode: str,
) -> float:
    if scheme == "OURS":
        makespan, _ = simulate_timeline(order, timings, arrivals, mode)
        return makespan
    if scheme == "SFL":
        makespan, _ = shared_server_makespan(timings, arrivals)
        return makespan
    # SL: one client at a time, full serial chain each, no overlap
    return sum(
        t.client_forward + t.uplink + t.server + t.downlink + t.client_backward
        for t in timings
    )


def _run_sl_round(
    clients: Sequence[ClientState],
    server: ServerState,
    shared: list[LoraAdapter],
    lr: float,
    batch: int,
) -> tuple[float, float]:
    """One round-robin cycle of the migrating single-model baseline.

    Each visit is one minibatch step through the visiting client's split of
    the one shared adapter set; updates land in place, so the next client
    inherits them immediately.
    """
    n_stages = server.stack.num_layers + 2
    losses = []
    correct = 0
    for c in sorted(clients, key=lambda c: c.client_id):
        cut = c.device.cut
        lower = [a for a in shared if a.layer_index <= cut]
        upper = [a for a in shared if a.layer_index > cut]
        idx = c.rng.integers(0, c.data_size, size=batch)
        x, y = c.shard_x[idx], c.shard_y[idx]
        lo_cache = forward_partial(server.stack, lower, 0, cut + 1, x)
        server.cache_acquired()
        hi_cache = forward_partial(server.stack, upper, cut + 1, n_stages, lo_cache.output)
        loss, ok = loss_and_metrics(hi_cache.logits, y)
        hi_grads = backward_partial(server.stack, upper, hi_cache, labels=y)
        sgd_step(upper, hi_grads, lr)
        server.cache_released()
        lo_grads = backward_partial(server.stack, lower, lo_cache, upstream=hi_grads.input_grad)
        sgd_step(lower, lo_grads, lr)
        losses.append(loss)
        correct += ok
    return float(np.mean(losses)), correct / (batch * len(clients))


def run_training(
    model_cfg: ModelConfig,
    devices: Sequence[DeviceProfile],
    link: LinkProfile,
    server_capacity_flops: float,
    shards: Sequence[tuple[np.ndarray, np.ndarray]],
    scheme: str,
    scheduler: str | None,
    rounds: int,
    lr: float,
    batch: int,
    aggregation_interval: int,
    seed: int,
    timeline_mode: str = "event_driven",
    reschedule_each_round: bool = False,
    eval_fn: EvalFn | None = None,
) -> TrainingResult:
    """Full training run of one (scheme, scheduler) cell.

    Per-round eval metrics are computed on the current global model: the
    size-weighted aggregate of all client sets for OURS/SFL (without
    disturbing training state between aggregation rounds) and the migrating
    set for SL. ``final_adapters`` is that same global model after the last
    round.
    """
    scheme = scheme.upper()
    if scheme not in ("OURS", "SFL", "SL"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "SL" and scheduler is not None:
        raise ValueError("SL trains clients round-robin; a scheduler cannot apply")
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    if aggregation_interval < 1:
        raise ValueError(f"aggregation_interval must be >= 1, got {aggregation_interval}")
    if len(shards) != len(devices):
        raise ValueError(f"{len(shards)} shards for {len(devices)} devices")
    if timeline_mode not in TIMELINE_MODES:
        raise ValueError(f"unknown timeline mode {timeline_mode!r}")
    for d, (x, y) in zip(devices, shards):
        if len(y) < 1:
            raise ValueError(f"client {d.client_id}: empty shard")

    stack, full_set = init_model(model_cfg)
    timings = [
        time_components(d, link, server_capacity_flops, model_cfg, batch)
        for d in devices
    ]
    lags = {d.client_id: d.arrival_lag_s for d in devices}
    arrivals = arrival_times(timings, lags)

    streams = np.random.SeedSequence(seed).spawn(len(devices))
    ordered_devices = sorted(devices, key=lambda d: d.client_id)
    clients = []
    for dev, child in zip(ordered_devices, streams):
        i = [d.client_id for d in devices].index(dev.client_id)
        lo, _ = split_adapters(full_set.adapters, dev.cut)
        clients.append(
            ClientState(
                device=dev,
                shard_x=shards[i][0],
                shard_y=shards[i][1],
                rng=np.random.default_rng(child),
                adapters=lo,
            )
        )
    server = ServerState(
        stack=stack,
        adapters={
            c.client_id: split_adapters(full_set.adapters, c.device.cut)[1]
            for c in clients
        },
    )
    shared_sl = [
        # the migrating set of the single-model baseline
        LoraAdapter(a.layer_index, a.A.copy(), a.B.copy())
        for a in full_set.adapters
    ]

    def current_order() -> list[int]:
        if scheme == "OURS" and scheduler is not None:
            return make_order(scheduler, ordered_devices, timings, arrivals)
        return [c.client_id for c in clients]

    order = current_order()
    logs: list[RoundLog] = []
    clock = 0.0
    for t in range(1, rounds + 1):
        if reschedule_each_round:
            order = current_order()
        if scheme == "SL":
            loss, acc = _run_sl_round(clients, server, shared_sl, lr, batch)
            aggregated = False
        else:
            loss, acc = run_round(clients, server, order, lr, batch)
            aggregated = t % aggregation_interval == 0
            if aggregated:
                aggregate_round(clients, server)
        makespan = _round_clock(scheme, order, timings, arrivals, timeline_mode)
        clock += makespan
        if scheme == "SL":
            current_global = shared_sl
        else:
            current_global = aggregate(_views(clients, server))
        eval_acc, eval_f1 = eval_fn(current_global) if eval_fn else (None, None)
        logs.append(
            RoundLog(
                round=t,
                makespan_s=makespan,
                cum_time_s=clock,
                train_loss=loss,
                train_accuracy=acc,
                eval_accuracy=eval_acc,
                eval_macro_f1=eval_f1,
                aggregated=aggregated,
                order=list(order),
            )
        )

    final = current_global
    return TrainingResult(
        scheme=scheme,
        scheduler=scheduler,
        order=list(order),
        round_logs=logs,
        final_adapters=final,
        timings=timings,
        memory=memory_footprint(scheme, model_cfg, devices, batch),
        server_state=server,
    )
