"""Analytic cost model: per-step FLOPs, wall-clock components, memory.

Conventions
-----------
FLOPs count one multiply-add as 2. A hidden layer's forward pass on a
(batch, m) activation costs 2*batch*m^2 for the frozen matmul plus
4*batch*m*r for the two low-rank matmuls; a backward pass costs twice its
forward pass (activation and adapter gradients). The input lift and the
head follow the same rule with (d, m) and (m, K) shapes and no low-rank
term.

The client backward time deliberately excludes the input lift: the lift is
frozen and sits below the lowest adapter, so nothing downstream of it needs
a gradient. That makes a client's backward time exactly proportional to
cut / capacity, which is what the workload-ratio scheduling proxy relies
on.

Wall-clock model for one global step of a client u with cut c:

    client forward -> uplink -> [server queue] -> server fwd+bwd
                   -> downlink -> client backward

Activation payloads in either direction are batch * m elements at the
link's wire width, so uplink and downlink times are identical by
construction. Three queue disciplines are provided:

* ``step_makespan``: synchronized-availability model; a client's wait is
  the sum of the server times of everyone ordered before it, its
  completion is the plain sum of all six components.
* ``event_driven_makespan``: the server starts a job at
  max(activation arrival, server free); reduces to the synchronized model
  when every arrival is zero.
* ``shared_server_makespan``: all server jobs run concurrently under
  egalitarian processor sharing of one server's capacity (the timing model
  for the parallel multi-model baseline, which keeps one server-side model
  per client instead of sharing one).

Memory accounting is in 4-byte elements (32-bit deployment convention; the
simulation itself computes in float64, but only byte ratios are
meaningful). The sequential scheme keeps ONE frozen stack sized to the
deepest server-side range, per-client adapter sets, and a single live
activation cache; the parallel baseline pays for per-client frozen
submodels, concurrent gradient buffers, and concurrent caches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from sflsim.model_core import ModelConfig

__all__ = [
    "PARAM_BYTES",
    "DeviceProfile",
    "LinkProfile",
    "StepTiming",
    "MemoryReport",
    "flops_layer",
    "flops_linear",
    "client_flops",
    "server_flops",
    "time_components",
    "arrival_times",
    "step_makespan",
    "event_driven_makespan",
    "shared_server_makespan",
    "memory_footprint",
    "reference_devices",
]

PARAM_BYTES = 4  # element width for the analytic memory model

SCHEMES = ("OURS", "SFL", "SL")


@dataclass(frozen=True)
class DeviceProfile:
    """One client device: sustained compute rate and its split depth."""

    client_id: int
    capacity_flops: float
    cut: int
    name: str = ""
    arrival_lag_s: float = 0.0

    def __post_init__(self) -> None:
        if self.capacity_flops <= 0:
            raise ValueError(f"device {self.client_id}: capacity must be positive")
        if self.cut < 0:
            raise ValueError(f"device {self.client_id}: cut must be >= 0")
        if self.arrival_lag_s < 0:
            raise ValueError(f"device {self.client_id}: arrival lag must be >= 0")


@dataclass(frozen=True)
class LinkProfile:
    """Shared client<->server link; payloads are counted per element."""

    rate_bps: float
    bytes_per_element: int = 4

    def __post_init__(self) -> None:
        if self.rate_bps <= 0:
            raise ValueError("link rate must be positive")
        if self.bytes_per_element <= 0:
            raise ValueError("bytes_per_element must be positive")


@dataclass
class StepTiming:
    """Six wall-clock components of one client's global step, in seconds."""

    client_id: int
    client_forward: float
    uplink: float
    wait: float
    server: float
    downlink: float
    client_backward: float

    @property
    def total(self) -> float:
        return (
            self.client_forward
            + self.uplink
            + self.wait
            + self.server
            + self.downlink
            + self.client_backward
        )

    def to_json(self) -> dict:
        return {
            "client_id": self.client_id,
            "client_forward_s": self.client_forward,
            "uplink_s": self.uplink,
            "wait_s": self.wait,
            "server_s": self.server,
            "downlink_s": self.downlink,
            "client_backward_s": self.client_backward,
            "total_s": self.total,
        }


@dataclass
class MemoryReport:
    """Modeled peak bytes on the server plus per-client device bytes."""

    scheme: str
    server_frozen_bytes: int
    server_adapter_bytes: int
    server_activation_bytes: int
    server_gradient_bytes: int
    client_bytes: dict[int, int] = field(default_factory=dict)

    @property
    def server_total_bytes(self) -> int:
        return (
            self.server_frozen_bytes
            + self.server_adapter_bytes
            + self.server_activation_bytes
            + self.server_gradient_bytes
        )

    def to_json(self) -> dict:
        return {
            "scheme": self.scheme,
            "server_total_bytes": self.server_total_bytes,
            "server_frozen_bytes": self.server_frozen_bytes,
            "server_adapter_bytes": self.server_adapter_bytes,
            "server_activation_bytes": self.server_activation_bytes,
            "server_gradient_bytes": self.server_gradient_bytes,
            "client_bytes": {str(k): v for k, v in sorted(self.client_bytes.items())},
        }


def flops_layer(batch: int, m: int, r: int, direction: str = "forward") -> float:
    """FLOPs of one hidden layer pass: frozen matmul plus low-rank path."""
    _check_batch(batch)
    forward = 2.0 * batch * m * m + 4.0 * batch * m * r
    return _directed(forward, direction)


def flops_linear(
    batch: int, dim_in: int, dim_out: int, direction: str = "forward"
) -> float:
    """FLOPs of a plain frozen linear stage (input lift or head)."""
    _check_batch(batch)
    forward = 2.0 * batch * dim_in * dim_out
    return _directed(forward, direction)


def _directed(forward: float, direction: str) -> float:
    if direction == "forward":
        return forward
    if direction == "backward":
        return 2.0 * forward
    raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")


def _check_batch(batch: int) -> None:
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")


def _check_cut(model: ModelConfig, cut: int) -> None:
    if not 0 <= cut <= model.num_layers:
        raise ValueError(f"cut {cut} outside 0..{model.num_layers}")


def client_flops(
    model: ModelConfig, cut: int, batch: int, direction: str = "forward"
) -> float:
    """Client-side work: lift plus ``cut`` hidden layers going up, hidden
    layers only coming down (no gradient is needed below the lowest
    adapter, so the frozen lift is never backpropagated through)."""
    _check_cut(model, cut)
    hidden_fwd = cut * flops_layer(batch, model.hidden_dim, model.rank)
    if direction == "forward":
        return flops_linear(batch, model.input_dim, model.hidden_dim) + hidden_fwd
    if direction == "backward":
        return 2.0 * hidden_fwd
    raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")


def server_flops(
    model: ModelConfig, cut: int, batch: int, direction: str = "forward"
) -> float:
    """Server-side work: remaining hidden layers plus the head."""
    _check_cut(model, cut)
    forward = (model.num_layers - cut) * flops_layer(
        batch, model.hidden_dim, model.rank
    ) + flops_linear(batch, model.hidden_dim, model.num_classes)
    return _directed(forward, direction)


def activation_bits(model: ModelConfig, batch: int, link: LinkProfile) -> float:
    """Wire size of the split-boundary tensor, identical in both directions."""
    return batch * model.hidden_dim * link.bytes_per_element * 8.0


def time_components(
    device: DeviceProfile,
    link: LinkProfile,
    server_capacity_flops: float,
    model: ModelConfig,
    batch: int,
) -> StepTiming:
    """Fill the six per-step components for one client; wait starts at 0."""
    if server_capacity_flops <= 0:
        raise ValueError("server capacity must be positive")
    _check_cut(model, device.cut)
    comm = activation_bits(model, batch, link) / link.rate_bps
    return StepTiming(
        client_id=device.client_id,
        client_forward=client_flops(model, device.cut, batch) / device.capacity_flops,
        uplink=comm,
        wait=0.0,
        server=(
            server_flops(model, device.cut, batch)
            + server_flops(model, device.cut, batch, "backward")
        )
        / server_capacity_flops,
        downlink=comm,
        client_backward=client_flops(model, device.cut, batch, "backward")
        / device.capacity_flops,
    )


def arrival_times(
    timings: Sequence[StepTiming], lags: Mapping[int, float] | None = None
) -> dict[int, float]:
    """When each client's activations reach the server: lag + fwd + uplink."""
    lags = lags or {}
    return {
        t.client_id: lags.get(t.client_id, 0.0) + t.client_forward + t.uplink
        for t in timings
    }


def _timing_map(timings: Sequence[StepTiming]) -> dict[int, StepTiming]:
    tmap = {t.client_id: t for t in timings}
    if len(tmap) != len(timings):
        raise ValueError("duplicate client ids in timings")
    return tmap


def _check_order(order: Sequence[int], tmap: Mapping[int, StepTiming]) -> None:
    if sorted(order) != sorted(tmap):
        raise ValueError(
            f"order {list(order)} is not a permutation of clients {sorted(tmap)}"
        )


def step_makespan(
    order: Sequence[int], timings: Sequence[StepTiming]
) -> tuple[float, list[StepTiming]]:
    """Synchronized-availability makespan.

    Client u's wait is the summed server time of clients ordered before it;
    its completion is the sum of all six components. Returns the slowest
    completion and per-client timings with ``wait`` filled (input objects
    are not mutated).
    """
    tmap = _timing_map(timings)
    _check_order(order, tmap)
    filled = []
    queue = 0.0
    for cid in order:
        filled.append(replace(tmap[cid], wait=queue))
        queue += tmap[cid].server
    makespan = max(t.total for t in filled)
    return makespan, filled


def event_driven_makespan(
    order: Sequence[int],
    timings: Sequence[StepTiming],
    arrivals: Mapping[int, float] | None = None,
) -> tuple[float, dict[int, float]]:
    """Makespan when the server starts each job at max(arrival, free).

    ``arrivals`` maps client id to the instant its activations reach the
    server (default 0 for everyone, which reproduces step_makespan's queue
    waits exactly). Completion of a job is server finish + downlink +
    client backward. Returns (makespan, per-client completion times).
    """
    tmap = _timing_map(timings)
    _check_order(order, tmap)
    arrivals = arrivals or {}
    free = 0.0
    completions: dict[int, float] = {}
    for cid in order:
        t = tmap[cid]
        start = max(arrivals.get(cid, 0.0), free)
        free = start + t.server
        completions[cid] = free + t.downlink + t.client_backward
    return max(completions.values()), completions


def shared_server_makespan(
    timings: Sequence[StepTiming],
    arrivals: Mapping[int, float] | None = None,
) -> tuple[float, dict[int, float]]:
    """Makespan when all server jobs share one server concurrently.

    Egalitarian processor sharing: k live jobs each progress at 1/k of the
    server's rate. Total server occupancy matches the sequential sum, but
    long jobs (shallow cuts) are dragged toward the end, so their client
    backward tails start late. Returns (makespan, per-client completions).
    """
    tmap = _timing_map(timings)
    arrivals = arrivals or {}
    pending = sorted(
        ((arrivals.get(cid, 0.0), cid) for cid in tmap), key=lambda p: (p[0], p[1])
    )
    remaining: dict[int, float] = {}
    finish: dict[int, float] = {}
    now = 0.0

    def admit(until: float) -> None:
        nonlocal now
        now = until
        while pending and pending[0][0] <= until:
            _, cid = pending.pop(0)
            work = tmap[cid].server
            if work <= 0.0:
                finish[cid] = until
            else:
                remaining[cid] = work

    while pending or remaining:
        if not remaining:
            admit(pending[0][0])
            continue
        k = len(remaining)
        min_rem = min(remaining.values())
        next_completion = now + min_rem * k
        next_arrival = pending[0][0] if pending else math.inf
        if next_completion <= next_arrival:
            for cid in list(remaining):
                remaining[cid] -= min_rem
                if remaining[cid] <= 0.0:
                    del remaining[cid]
                    finish[cid] = next_completion
            now = next_completion
        else:
            dt = (next_arrival - now) / k
            for cid in list(remaining):
                remaining[cid] -= dt
                if remaining[cid] <= 0.0:
                    del remaining[cid]
                    finish[cid] = next_arrival
            admit(next_arrival)

    completions = {
        cid: finish[cid] + tmap[cid].downlink + tmap[cid].client_backward
        for cid in tmap
    }
    return max(completions.values()), completions


def _scheme_name(scheme: str) -> str:
    name = scheme.upper()
    if name not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    return name


def memory_footprint(
    scheme: str,
    model: ModelConfig,
    devices: Iterable[DeviceProfile],
    batch: int,
) -> MemoryReport:
    """Peak server memory plus per-client device memory, in bytes.

    Client side is identical across schemes: the frozen lift and lower
    layers, the local adapters with their gradients, and the cached
    boundary activations of one minibatch.

    Server side:

    * OURS: one frozen stack covering the deepest server-side range, all
      clients' server-side adapter sets, but gradient buffers and an
      activation cache for only one in-flight client (jobs are sequential).
    * SFL: a frozen submodel, gradient buffers and an activation cache per
      client, all concurrently resident.
    * SL: the single active client's server-side submodel, adapters,
      gradients and cache; peak over clients.
    """
    name = _scheme_name(scheme)
    _check_batch(batch)
    devs = sorted(devices, key=lambda d: d.client_id)
    if not devs:
        raise ValueError("at least one device required")
    for d in devs:
        _check_cut(model, d.cut)

    n, m, rank = model.num_layers, model.hidden_dim, model.rank
    hidden_elems = m * m
    head_elems = m * model.num_classes
    lift_elems = model.input_dim * m
    adapter_elems = 2 * m * rank  # A and B factors of one layer

    def server_cache_elems(cut: int) -> int:
        # boundary tensors entering each server stage, plus the logits
        return (n - cut + 1) * batch * m + batch * model.num_classes

    def client_total(d: DeviceProfile) -> int:
        frozen = lift_elems + d.cut * hidden_elems
        adapters = d.cut * adapter_elems
        grads = d.cut * adapter_elems
        cache = batch * model.input_dim + (d.cut + 1) * batch * m
        return (frozen + adapters + grads + cache) * PARAM_BYTES

    client_bytes = {d.client_id: client_total(d) for d in devs}

    if name == "OURS":
        deepest = n - min(d.cut for d in devs)
        frozen = deepest * hidden_elems + head_elems
        adapters = sum((n - d.cut) * adapter_elems for d in devs)
        grads = max((n - d.cut) * adapter_elems for d in devs)
        acts = max(server_cache_elems(d.cut) for d in devs)
    elif name == "SFL":
        frozen = sum((n - d.cut) * hidden_elems + head_elems for d in devs)
        adapters = sum((n - d.cut) * adapter_elems for d in devs)
        grads = sum((n - d.cut) * adapter_elems for d in devs)
        acts = sum(server_cache_elems(d.cut) for d in devs)
    else:  # SL: one migrating model, one active client at a time
        per_client = []
        for d in devs:
            fr = (n - d.cut) * hidden_elems + head_elems
            ad = (n - d.cut) * adapter_elems
            per_client.append((fr + 2 * ad + server_cache_elems(d.cut), fr, ad, d))
        peak = max(per_client, key=lambda p: (p[0], -p[3].client_id))
        frozen, adapters = peak[1], peak[2]
        grads = peak[2]
        acts = peak[0] - peak[1] - 2 * peak[2]

    return MemoryReport(
        scheme=name,
        server_frozen_bytes=frozen * PARAM_BYTES,
        server_adapter_bytes=adapters * PARAM_BYTES,
        server_activation_bytes=acts * PARAM_BYTES,
        server_gradient_bytes=grads * PARAM_BYTES,
        client_bytes=client_bytes,
    )


# Published peak-throughput figures for the six-device heterogeneous
# testbed this simulator models by default, with the number of lower
# layers each device hosts.
_REFERENCE_SOCS = (
    ("jetson-nano", 0.472, 1),
    ("jetson-tx2", 1.33, 1),
    ("snapdragon-8s-gen3", 1.689, 2),
    ("snapdragon-8-gen3", 2.774, 2),
    ("a17-pro", 2.147, 3),
    ("m3", 3.533, 3),
)


def reference_devices(capacity_scale: float = 1e12) -> list[DeviceProfile]:
    """The six-SoC testbed; ``capacity_scale`` converts TFLOPS to FLOP/s.

    Pass a smaller scale to shrink the testbed to desk-size workloads while
    preserving the capacity ratios.
    """
    return [
        DeviceProfile(
            client_id=i + 1,
            name=name,
            capacity_flops=tflops * capacity_scale,
            cut=cut,
        )
        for i, (name, tflops, cut) in enumerate(_REFERENCE_SOCS)
    ]
