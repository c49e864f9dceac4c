import json

import pytest
from conftest import two_node_topology

from core import DEFAULT_BAND_24GHZ, DEFAULT_BAND_868MHZ, DEFAULT_SEED, AppConfig, ConfigError, SimTime
from engine import (
    BandSimulation,
    InvariantError,
    PacketFate,
    RunConfig,
    check_conservation,
    fate_counts,
    generate_app_schedule,
    run_band,
    trace_to_json,
    trace_to_text,
)
from propagation import default_waterfall
from rpl import DagState
from topology import generate_linear, generate_random
from utils import make_rng


def two_node_config(band, setup_time=300.0, duration=100.0, **kwargs) -> RunConfig:
    app = AppConfig(setup_time=setup_time, duration=duration, seed=0x1234)
    return RunConfig(two_node_topology(), band, app, default_waterfall(), **kwargs)


def test_schedule_is_periodic_without_jitter():
    schedule = generate_app_schedule(AppConfig(), [1, 2], make_rng(1))
    assert len(schedule) == 2 * 720
    assert [p.t_gen for p in schedule[:4]] == [5_400_000_000, 5_400_000_000, 5_410_000_000, 5_410_000_000]
    assert [(p.node, p.packet.sequence) for p in schedule[:4]] == [(1, 0), (2, 0), (1, 1), (2, 1)]


def test_schedule_jitter_stays_within_half_the_variance():
    app = AppConfig(interval_variance=2.0, duration=100.0)
    schedule = generate_app_schedule(app, [1, 2, 3], make_rng(1))
    for p in schedule:
        nominal = app.setup_time_us + p.packet.sequence * app.message_interval_us
        assert abs(p.t_gen - nominal) <= 1_000_000
    assert schedule == generate_app_schedule(app, [1, 2, 3], make_rng(1))


@pytest.mark.parametrize("band", [DEFAULT_BAND_24GHZ, DEFAULT_BAND_868MHZ])
def test_two_node_perfect_link(band):
    trace = run_band(two_node_config(band))
    assert trace.unjoined_at_setup == ()
    assert len(trace.records) == 10
    slotframe_us = 101 * band.slot_duration_us
    for r in trace.records:
        assert r.fate == PacketFate.DELIVERED
        assert r.hop_attempts == (1,)
        assert 0 <= r.latency <= slotframe_us
    assert check_conservation(trace) == []


def test_zero_duration_gives_a_formation_only_trace():
    trace = run_band(two_node_config(DEFAULT_BAND_24GHZ, duration=0.0))
    assert trace.records == ()
    assert trace.nodes[1].joined


def test_runs_are_bit_identical():
    config = two_node_config(DEFAULT_BAND_868MHZ, setup_time=120.0, duration=60.0)
    first, second = run_band(config), run_band(config)
    assert first == second
    assert trace_to_text(first) == trace_to_text(second)


def _random_config(band, check_invariants=False) -> RunConfig:
    app = AppConfig(setup_time=120.0, duration=120.0, seed=0xBEEF)
    topology = generate_random(10, 100.0, make_rng(app.seed, "topology", "random", "10"), DEFAULT_BAND_24GHZ)
    return RunConfig(topology, band, app, default_waterfall(), check_invariants=check_invariants)


@pytest.mark.parametrize("band", [DEFAULT_BAND_24GHZ, DEFAULT_BAND_868MHZ])
def test_conservation_and_retry_bound_on_a_random_topology(band):
    trace = run_band(_random_config(band, check_invariants=True))
    assert check_conservation(trace) == []
    assert sum(fate_counts(trace).values()) == len(trace.records) == 9 * 12
    assert all(a <= 4 for r in trace.records for a in r.hop_attempts)
    for r in trace.records:
        if r.delivered:
            assert r.t_arrival >= r.t_gen
            assert r.hops == len(r.hop_attempts) >= 1


def test_packets_created_before_joining_are_dropped():
    config = two_node_config(DEFAULT_BAND_24GHZ, setup_time=0.005, duration=20.0)
    trace = run_band(config)
    assert trace.unjoined_at_setup == (1,)
    assert trace.records[0].fate == PacketFate.UNJOINED_DROP
    assert trace.nodes[1].unjoined_drops >= 1


def test_trace_text_format():
    trace = run_band(two_node_config(DEFAULT_BAND_24GHZ))
    lines = trace_to_text(trace, spec_hash="abc").splitlines()
    assert lines[0].startswith("tracefmt=1 band=24ghz seed=0x1234 nodes=2")
    assert lines[0].endswith("spec=abc")
    assert len(lines) == 11
    fields = lines[1].split()
    assert fields[:5] == ["pkt", "1", "0", "300.000000", "1"]
    assert fields[6:] == ["1", "1"]


def test_trace_json_document():
    trace = run_band(two_node_config(DEFAULT_BAND_24GHZ))
    document = json.loads(json.dumps(trace_to_json(trace)))
    assert document["tracefmt"] == 1
    assert len(document["packets"]) == 10
    assert document["packets"][0]["fate"] == "delivered"


def test_invalid_band_is_rejected_before_running():
    with pytest.raises(ConfigError):
        run_band(two_node_config(DEFAULT_BAND_24GHZ.replace(slot_duration_us=0)))


def test_hop_sequence_must_be_a_permutation():
    with pytest.raises(ConfigError):
        run_band(two_node_config(DEFAULT_BAND_24GHZ, hop_sequence=(0,) * 16))


def test_corrupted_parent_graph_raises_when_invariants_are_checked():
    simulation = BandSimulation(two_node_config(DEFAULT_BAND_24GHZ, check_invariants=True))
    simulation.nodes[1].dag = DagState(rank=100, preferred_parent=0, joined=True)
    with pytest.raises(InvariantError, match=r"node 1 \(rank 100\) has parent 0"):
        simulation._slotframe_boundary(1, SimTime(0))

    unchecked = BandSimulation(two_node_config(DEFAULT_BAND_24GHZ))
    unchecked.nodes[1].dag = DagState(rank=100, preferred_parent=0, joined=True)
    unchecked._slotframe_boundary(1, SimTime(0))


def test_dense_linear_network_forms_within_a_short_setup_time():
    app = AppConfig(setup_time=600.0, duration=0.0, seed=DEFAULT_SEED)
    config = RunConfig(generate_linear(40, 10.0), DEFAULT_BAND_868MHZ, app, default_waterfall(), check_invariants=True)
    trace = run_band(config)
    assert trace.unjoined_at_setup == ()
    assert all(n.joined for n in trace.nodes)
