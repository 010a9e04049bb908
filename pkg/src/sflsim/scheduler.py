"""Server-side client ordering policies for the sequential training pipeline.

The server trains one client's upper segment at a time, so the processing
order decides how long each client's backward tail waits. Ordering clients
by descending workload ratio cut/capacity puts the slow, shallow-cut
devices first; their long backward passes then overlap the server's work
on everyone else. The ratio is a proxy for the true client backward time,
and is exactly order-equivalent to it under this cost model because client
backward FLOPs are proportional to the cut.

Policies:

* ``greedy``   workload ratio descending (ties: ascending client id)
* ``fifo``     activation arrival ascending (ties: ascending client id)
* ``wf``       server job time descending, a work-first baseline
* ``optimal``  exhaustive search over all permutations (small cohorts only)

All policies are pure functions of their inputs and deterministic,
including tie-breaks.
"""

from __future__ import annotations

from itertools import permutations
from typing import Mapping, Sequence

from sflsim.costmodel import DeviceProfile, StepTiming

__all__ = [
    "greedy_order",
    "fifo_order",
    "wf_order",
    "brute_force_order",
    "make_order",
    "SCHEDULER_POLICIES",
]

SCHEDULER_POLICIES = ("greedy", "fifo", "wf", "optimal")

BRUTE_FORCE_MAX_CLIENTS = 9


def greedy_order(devices: Sequence[DeviceProfile]) -> list[int]:
    """Workload-ratio order: cut / capacity descending."""
    if not devices:
        raise ValueError("no devices to order")
    ranked = sorted(
        devices, key=lambda d: (-(d.cut / d.capacity_flops), d.client_id)
    )
    return [d.client_id for d in ranked]


def fifo_order(arrivals: Mapping[int, float]) -> list[int]:
    """First-come-first-served on activation arrival instants."""
    if not arrivals:
        raise ValueError("no arrivals to order")
    return [cid for _, cid in sorted((t, cid) for cid, t in arrivals.items())]


def wf_order(timings: Sequence[StepTiming]) -> list[int]:
    """Largest server job first."""
    if not timings:
        raise ValueError("no timings to order")
    ranked = sorted(timings, key=lambda t: (-t.server, t.client_id))
    return [t.client_id for t in ranked]


def brute_force_order(
    timings: Sequence[StepTiming],
    arrivals: Mapping[int, float] | None = None,
) -> tuple[list[int], float]:
    """Exhaustively minimize the event-driven makespan.

    Returns the lexicographically smallest optimal order and its makespan.
    Refuses cohorts above 9 clients (permutation count explodes).
    """
    ids = sorted(t.client_id for t in timings)
    if not ids:
        raise ValueError("no timings to order")
    if len(ids) > BRUTE_FORCE_MAX_CLIENTS:
        raise ValueError(
            f"brute force limited to {BRUTE_FORCE_MAX_CLIENTS} clients, got {len(ids)}"
        )
    arrivals = arrivals or {}
    arr = {t.client_id: arrivals.get(t.client_id, 0.0) for t in timings}
    srv = {t.client_id: t.server for t in timings}
    tail = {t.client_id: t.downlink + t.client_backward for t in timings}

    best_order: tuple[int, ...] | None = None
    best = float("inf")
    # permutations() over the sorted ids yields candidates in lexicographic
    # order, so keeping only strict improvements retains the smallest argmin
    for perm in permutations(ids):
        free = 0.0
        worst = 0.0
        for cid in perm:
            start = arr[cid] if arr[cid] > free else free
            free = start + srv[cid]
            done = free + tail[cid]
            if done > worst:
                worst = done
        if worst < best:
            best = worst
            best_order = perm
    assert best_order is not None
    return list(best_order), best


def make_order(
    policy: str,
    devices: Sequence[DeviceProfile],
    timings: Sequence[StepTiming],
    arrivals: Mapping[int, float] | None = None,
) -> list[int]:
    """Dispatch on the scheduler name used in configs."""
    if policy == "greedy":
        return greedy_order(devices)
    if policy == "fifo":
        if arrivals is None:
            raise ValueError("fifo requires arrival times")
        return fifo_order(arrivals)
    if policy == "wf":
        return wf_order(timings)
    if policy == "optimal":
        order, _ = brute_force_order(timings, arrivals)
        return order
    raise ValueError(
        f"unknown scheduler {policy!r}, expected one of {SCHEDULER_POLICIES}"
    )
