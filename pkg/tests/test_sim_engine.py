"""Engine semantics: split == monolithic, order independence, cadences, clocks."""

import numpy as np
import pytest

from sflsim.costmodel import DeviceProfile, LinkProfile, time_components
from sflsim.federation import ClientAdapterView, aggregate, split_adapters
from sflsim.model_core import (
    ModelConfig,
    backward_partial,
    forward_partial,
    init_model,
    loss_and_metrics,
    sgd_step,
)
from sflsim.sim_engine import (
    ClientState,
    ServerState,
    aggregate_round,
    run_round,
    run_training,
    simulate_timeline,
)

MODEL = ModelConfig(
    num_layers=6, hidden_dim=32, rank=4, input_dim=16, num_classes=4, seed=7
)
LINK = LinkProfile(rate_bps=1e6)


def make_shard(rng, n=60, d=16, k=4):
    return rng.normal(size=(n, d)), rng.integers(0, k, size=n)


def make_devices(cuts, caps=None):
    caps = caps or [1e6] * len(cuts)
    return [
        DeviceProfile(client_id=i + 1, capacity_flops=c, cut=cut)
        for i, (cut, c) in enumerate(zip(cuts, caps))
    ]


def small_run(scheme, scheduler, cuts=(1, 2, 3), rounds=4, seed=3, **kw):
    rng = np.random.default_rng(99)
    devices = make_devices(cuts)
    shards = [make_shard(rng) for _ in devices]
    return run_training(
        model_cfg=MODEL,
        devices=devices,
        link=LINK,
        server_capacity_flops=1e7,
        shards=shards,
        scheme=scheme,
        scheduler=scheduler,
        rounds=rounds,
        lr=0.05,
        batch=8,
        aggregation_interval=kw.pop("aggregation_interval", 3),
        seed=seed,
        **kw,
    )


def manual_monolithic_run(shard, rounds, lr, batch, seed):
    """Independent single-machine LoRA SGD loop on the same stream."""
    stack, aset = init_model(MODEL)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    x_all, y_all = shard
    for _ in range(rounds):
        idx = rng.integers(0, len(y_all), size=batch)
        cache = forward_partial(stack, aset.adapters, 0, MODEL.num_stages, x_all[idx])
        grads = backward_partial(stack, aset.adapters, cache, labels=y_all[idx])
        sgd_step(aset.adapters, grads, lr)
    return aset.adapters


@pytest.mark.parametrize("cut", range(0, 7))
def test_single_client_round_equals_monolithic_step(cut):
    rng = np.random.default_rng(42)
    shard = make_shard(rng, n=50)
    result = run_training(
        model_cfg=MODEL,
        devices=make_devices([cut]),
        link=LINK,
        server_capacity_flops=1e7,
        shards=[shard],
        scheme="OURS",
        scheduler="greedy",
        rounds=3,
        lr=0.05,
        batch=8,
        aggregation_interval=100,  # no aggregation inside the window
        seed=123,
    )
    expected = manual_monolithic_run(shard, rounds=3, lr=0.05, batch=8, seed=123)
    assert len(result.final_adapters) == len(expected)
    for got, want in zip(result.final_adapters, expected):
        np.testing.assert_allclose(got.A, want.A, rtol=1e-12, atol=0)
        np.testing.assert_allclose(got.B, want.B, rtol=1e-12, atol=0)


def test_learning_is_independent_of_server_order():
    results = {}
    for policy in ("greedy", "fifo", "wf"):
        results[policy] = small_run(
            "OURS", policy, cuts=(1, 3, 2), rounds=5, seed=11
        )
    orders = {tuple(r.order) for r in results.values()}
    assert len(orders) > 1  # policies actually disagree on this instance
    base = results["greedy"]
    for other in (results["fifo"], results["wf"]):
        assert [l.train_loss for l in other.round_logs] == [
            l.train_loss for l in base.round_logs
        ]
        for got, want in zip(other.final_adapters, base.final_adapters):
            assert np.array_equal(got.A, want.A)
            assert np.array_equal(got.B, want.B)


def test_parallel_baseline_learns_identically_but_clocks_differently():
    ours = small_run("OURS", "greedy", rounds=6, seed=5)
    sfl = small_run("SFL", None, rounds=6, seed=5)
    assert [l.train_loss for l in sfl.round_logs] == [
        l.train_loss for l in ours.round_logs
    ]
    for got, want in zip(sfl.final_adapters, ours.final_adapters):
        assert np.array_equal(got.A, want.A)
    assert sfl.round_logs[0].makespan_s != ours.round_logs[0].makespan_s


def test_aggregation_cadence_flags():
    result = small_run("OURS", "greedy", rounds=7, aggregation_interval=3)
    flags = [l.aggregated for l in result.round_logs]
    assert flags == [False, False, True, False, False, True, False]


def test_aggregate_round_synchronizes_all_clients():
    rng = np.random.default_rng(17)
    devices = make_devices((1, 2, 3))
    stack, full = init_model(MODEL)
    clients = []
    for d, child in zip(devices, np.random.SeedSequence(0).spawn(3)):
        lo, _ = split_adapters(full.adapters, d.cut)
        x, y = make_shard(rng)
        clients.append(ClientState(d, x, y, np.random.default_rng(child), lo))
    server = ServerState(
        stack=stack,
        adapters={c.client_id: split_adapters(full.adapters, c.device.cut)[1] for c in clients},
    )
    for _ in range(3):
        run_round(clients, server, [1, 2, 3], lr=0.05, batch=8)

    # clients have drifted apart before aggregation
    drift = max(
        np.max(np.abs(server.adapters[1][-1].A - server.adapters[2][-1].A)), 0.0
    )
    assert drift > 0.0

    merged = aggregate_round(clients, server)
    for c in clients:
        view = ClientAdapterView(
            c.client_id, c.device.cut, c.adapters, server.adapters[c.client_id], c.data_size
        )
        full_now = aggregate([view])
        for got, want in zip(full_now, merged):
            np.testing.assert_allclose(got.A, want.A, rtol=0, atol=1e-12)
            np.testing.assert_allclose(got.B, want.B, rtol=0, atol=1e-12)


def test_single_model_baseline_matches_sequential_on_one_client():
    rng = np.random.default_rng(31)
    shard = make_shard(rng, n=40)
    kw = dict(
        model_cfg=MODEL,
        devices=make_devices([2]),
        link=LINK,
        server_capacity_flops=1e7,
        shards=[shard],
        rounds=5,
        lr=0.05,
        batch=8,
        aggregation_interval=1000,
        seed=77,
    )
    ours = run_training(scheme="OURS", scheduler="greedy", **kw)
    sl = run_training(scheme="SL", scheduler=None, **kw)
    assert [l.train_loss for l in sl.round_logs] == [
        l.train_loss for l in ours.round_logs
    ]


def test_single_model_baseline_clock_and_flags():
    result = small_run("SL", None, rounds=4)
    serial = sum(
        t.client_forward + t.uplink + t.server + t.downlink + t.client_backward
        for t in result.timings
    )
    for log in result.round_logs:
        assert log.makespan_s == pytest.approx(serial, rel=1e-12)
        assert log.aggregated is False
    with pytest.raises(ValueError):
        small_run("SL", "greedy")


def test_frozen_stack_untouched_and_single_cache():
    result = small_run("OURS", "greedy", rounds=6)
    fresh, _ = init_model(MODEL)
    state = result.server_state
    assert state.frozen_stacks == 1
    assert state.peak_live_caches == 1
    assert state.live_caches == 0
    assert np.array_equal(state.stack.input_lift, fresh.input_lift)
    assert all(np.array_equal(a, b) for a, b in zip(state.stack.hidden, fresh.hidden))
    assert np.array_equal(state.stack.head, fresh.head)


def test_run_training_is_deterministic():
    a = small_run("OURS", "greedy", rounds=5, seed=21)
    b = small_run("OURS", "greedy", rounds=5, seed=21)
    assert [l.to_json() for l in a.round_logs] == [l.to_json() for l in b.round_logs]
    for x, y in zip(a.final_adapters, b.final_adapters):
        assert np.array_equal(x.A, y.A)
        assert np.array_equal(x.B, y.B)
    c = small_run("OURS", "greedy", rounds=5, seed=22)
    assert [l.train_loss for l in c.round_logs] != [l.train_loss for l in a.round_logs]


def test_eval_callback_feeds_round_logs():
    rng = np.random.default_rng(55)
    eval_x, eval_y = make_shard(rng, n=30)
    stack, _ = init_model(MODEL)

    def eval_fn(adapters):
        cache = forward_partial(stack, adapters, 0, MODEL.num_stages, eval_x)
        _, ok = loss_and_metrics(cache.logits, eval_y)
        return ok / len(eval_y), 0.5

    result = small_run("OURS", "greedy", rounds=3, eval_fn=eval_fn)
    for log in result.round_logs:
        assert 0.0 <= log.eval_accuracy <= 1.0
        assert log.eval_macro_f1 == 0.5
    bare = small_run("OURS", "greedy", rounds=2)
    assert bare.round_logs[0].eval_accuracy is None


def test_timeline_modes_and_clock_accumulation():
    analytic = small_run("OURS", "greedy", rounds=3, timeline_mode="analytic")
    event = small_run("OURS", "greedy", rounds=3, timeline_mode="event_driven")
    for r in (analytic, event):
        cums = [l.cum_time_s for l in r.round_logs]
        assert all(b > a for a, b in zip(cums, cums[1:]))
        spans = {l.makespan_s for l in r.round_logs}
        assert len(spans) == 1  # static inputs -> constant round time
    assert analytic.round_logs[0].makespan_s >= event.round_logs[0].makespan_s

    rescheduled = small_run("OURS", "greedy", rounds=3, reschedule_each_round=True)
    static = small_run("OURS", "greedy", rounds=3)
    assert [l.order for l in rescheduled.round_logs] == [
        l.order for l in static.round_logs
    ]


def test_simulate_timeline_dispatch():
    devices = make_devices((1, 2))
    ts = [time_components(d, LINK, 1e7, MODEL, 8) for d in devices]
    m_a, comp_a = simulate_timeline([1, 2], ts, mode="analytic")
    m_e, comp_e = simulate_timeline([1, 2], ts, mode="event_driven")
    assert set(comp_a) == set(comp_e) == {1, 2}
    assert m_a >= m_e  # zero-lag arrivals still delay the event start
    with pytest.raises(ValueError):
        simulate_timeline([1, 2], ts, mode="exotic")


def test_run_training_validation():
    rng = np.random.default_rng(1)
    devices = make_devices((1, 2))
    shards = [make_shard(rng) for _ in devices]
    kw = dict(
        model_cfg=MODEL,
        devices=devices,
        link=LINK,
        server_capacity_flops=1e7,
        shards=shards,
        scheme="OURS",
        scheduler="greedy",
        rounds=2,
        lr=0.05,
        batch=8,
        aggregation_interval=2,
        seed=0,
    )
    with pytest.raises(ValueError):
        run_training(**{**kw, "scheme": "FED"})
    with pytest.raises(ValueError):
        run_training(**{**kw, "rounds": 0})
    with pytest.raises(ValueError):
        run_training(**{**kw, "aggregation_interval": 0})
    with pytest.raises(ValueError):
        run_training(**{**kw, "shards": shards[:1]})
    with pytest.raises(ValueError):
        run_training(**{**kw, "timeline_mode": "psychic"})
    empty = (np.zeros((0, 16)), np.zeros((0,), dtype=int))
    with pytest.raises(ValueError):
        run_training(**{**kw, "shards": [shards[0], empty]})


def test_sl_loss_noisier_than_ours_on_non_iid_shards():
    """The migrating single model sees one skewed shard at a time, so its
    per-round loss fluctuates more than the aggregated parallel scheme's.
    Asserted as a strict ordering of trailing-100-round loss std on the
    default experiment's fixed seed."""
    from sflsim.datasets import generate_dataset
    from sflsim.experiment import default_config

    cfg = default_config()
    shards, _ = generate_dataset(cfg.dataset, len(cfg.devices), cfg.seed)
    kw = dict(
        model_cfg=cfg.model,
        devices=cfg.devices,
        link=cfg.link,
        server_capacity_flops=cfg.server_capacity_flops,
        shards=shards,
        rounds=cfg.rounds,
        lr=cfg.learning_rate,
        batch=cfg.batch_size,
        aggregation_interval=cfg.aggregation_interval,
        seed=cfg.seed,
    )
    ours = run_training(scheme="OURS", scheduler="greedy", **kw)
    sl = run_training(scheme="SL", scheduler=None, **kw)
    std = {
        name: float(np.std([log.train_loss for log in res.round_logs[-100:]]))
        for name, res in (("ours", ours), ("sl", sl))
    }
    assert std["sl"] > std["ours"], std
