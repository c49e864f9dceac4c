import json
from fractions import Fraction

import pytest
from conftest import make_trace, record

from core import BandId, PacketId
from engine import PacketFate
from metrics import (
    COMBINED,
    MetricsError,
    band_latency,
    band_pdr,
    band_report,
    combine,
    empirical_cdf,
    mean_hop_count,
    winning_band_per_node,
    write_metrics_csv,
    write_metrics_json,
)

T0 = 5_400_000_000


def _pair(arrivals_24, arrivals_868, attempts_24=None, attempts_868=None, num_nodes=2):
    """One packet per entry, all from node 1, with the given arrival offsets (None = lost)"""
    attempts_24 = attempts_24 or [(1,)] * len(arrivals_24)
    attempts_868 = attempts_868 or [(1,)] * len(arrivals_868)

    def trace(arrivals, attempts, band):
        records = [
            record(1, k, T0, None if a is None else T0 + a, hop_attempts=h)
            for k, (a, h) in enumerate(zip(arrivals, attempts))
        ]
        return make_trace(records, num_nodes=num_nodes, band=band)

    return trace(arrivals_24, attempts_24, BandId.BAND_24GHZ), trace(arrivals_868, attempts_868, BandId.BAND_868MHZ)


def test_pdr_and_mean_latency():
    records = [record(1, k, T0, T0 + latency) for k, latency in enumerate((200_000, 300_000, 400_000))]
    records.append(record(1, 3, T0))
    trace = make_trace(records)
    assert band_pdr(trace) == 0.75
    assert band_latency(trace).mean == 0.3


def test_pdr_of_an_empty_trace_is_undefined():
    with pytest.raises(MetricsError):
        band_pdr(make_trace([]))


def test_latency_without_deliveries_is_none():
    stats = band_latency(make_trace([record(1, 0, T0)]))
    assert stats.mean is None and stats.cdf == ()


def test_empirical_cdf_steps():
    assert empirical_cdf([300_000, 100_000, 100_000, 200_000]) == ((0.1, 0.5), (0.2, 0.75), (0.3, 1.0))
    assert empirical_cdf([]) == ()


def test_mean_hop_count_ignores_lost_packets():
    trace = make_trace([record(1, 0, 0, 5, hop_attempts=(1, 1)), record(2, 0, 0, 9, hop_attempts=(1,)),
                        record(2, 1, 0, hop_attempts=(4,))], num_nodes=3)
    assert mean_hop_count(trace) == 1.5


def test_band_report_fields():
    trace = make_trace([record(1, 0, T0, T0 + 100_000, hop_attempts=(3,)), record(1, 1, T0)], unjoined=[1])
    report = band_report(trace)
    assert (report.band, report.generated, report.delivered, report.pdr) == ("24ghz", 2, 1, 0.5)
    assert report.total_retries == 2
    assert report.mean_retries_per_node == Fraction(2, 1)
    assert report.unjoined_nodes == 1
    assert report.per_node_latency == ((1, 0.1),)


def test_packet_delivered_only_on_868_is_received():
    trace24, trace868 = _pair([None], [800_000])
    outcomes, report = combine(trace24, trace868)
    assert outcomes[0].winning_band == BandId.BAND_868MHZ
    assert outcomes[0].latency == 800_000
    assert (report.band, report.pdr) == (COMBINED, 1.0)


def test_earlier_band_wins():
    trace24, trace868 = _pair([50_000], [900_000])
    outcomes, _ = combine(trace24, trace868)
    assert outcomes[0].winning_band == BandId.BAND_24GHZ
    assert outcomes[0].t_first_arrival == T0 + 50_000


def test_equal_arrival_times_go_to_24ghz():
    outcomes, _ = combine(*_pair([70_000], [70_000]))
    assert outcomes[0].winning_band == BandId.BAND_24GHZ


def test_combined_retries_follow_the_winning_band():
    trace24, trace868 = _pair([400_000, None], [100_000, None],
                              attempts_24=[(1,), (4, 2)], attempts_868=[(3, 1), (2,)])
    outcomes, report = combine(trace24, trace868)
    assert [o.combined_retries for o in outcomes] == [2, 1]
    assert report.total_retries == 3


def test_combined_pdr_is_the_union():
    arrivals_24 = [10, None, 10, None]
    arrivals_868 = [20, 20, None, None]
    trace24, trace868 = _pair(arrivals_24, arrivals_868)
    outcomes, report = combine(trace24, trace868)
    assert [o.delivered_any for o in outcomes] == [True, True, True, False]
    assert report.pdr == 0.75
    assert report.pdr >= max(band_pdr(trace24), band_pdr(trace868))
    assert report.pdr <= band_pdr(trace24) + band_pdr(trace868)


def test_combined_latency_never_exceeds_either_band():
    trace24, trace868 = _pair([100, 500, 300], [200, 400, 300])
    outcomes, _ = combine(trace24, trace868)
    for o, r24, r868 in zip(outcomes, trace24.records, trace868.records):
        assert o.latency == min(r24.latency, r868.latency)


def test_mismatched_schedules_are_rejected():
    trace24, _ = _pair([10, 20], [10, 20])
    _, other868 = _pair([10], [10])
    with pytest.raises(MetricsError):
        combine(trace24, other868)


def test_swapped_bands_are_rejected():
    trace24, trace868 = _pair([10], [10])
    with pytest.raises(MetricsError):
        combine(trace868, trace24)


def test_winning_band_per_node_uses_mean_latency():
    records24 = [record(1, 0, 0, 100), record(1, 1, 0, 300), record(2, 0, 0, 50), record(3, 0, 0)]
    records868 = [record(1, 0, 0, 250), record(1, 1, 0, 250), record(2, 0, 0, 60), record(3, 0, 0)]
    outcomes, report = combine(make_trace(records24, 4, BandId.BAND_24GHZ),
                               make_trace(records868, 4, BandId.BAND_868MHZ))
    winners = winning_band_per_node(outcomes)
    assert winners == {1: BandId.BAND_24GHZ, 2: BandId.BAND_24GHZ, 3: None}

    records868[0] = record(1, 0, 0, 90)
    outcomes, _ = combine(make_trace(records24, 4, BandId.BAND_24GHZ), make_trace(records868, 4, BandId.BAND_868MHZ))
    assert winning_band_per_node(outcomes)[1] == BandId.BAND_868MHZ
    assert dict(report.winning_band_counts) == {"24ghz": 2, "868mhz": 0, "unclassified": 1}


def test_queue_dropped_packets_are_not_received():
    records = [record(1, 0, T0, fate=PacketFate.QUEUE_DROP, hop_attempts=())]
    trace = make_trace(records)
    assert band_pdr(trace) == 0.0
    assert band_report(trace).total_retries == 0


def test_metrics_files_carry_the_spec_hash(tmp_path):
    trace24, trace868 = _pair([100_000], [None])
    _, combined = combine(trace24, trace868)
    reports = [band_report(trace24), band_report(trace868), combined]

    write_metrics_json(reports, tmp_path / "metrics.json", "f00d")
    document = json.loads((tmp_path / "metrics.json").read_text())
    assert (document["format"], document["spec"]) == ("metrics/1", "f00d")
    assert [r["band"] for r in document["reports"]] == ["24ghz", "868mhz", "combined"]
    assert document["reports"][1]["mean_latency_s"] is None

    write_metrics_csv(reports, tmp_path / "metrics.csv", "f00d")
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "# format=metrics/1 spec=f00d"
    assert lines[1] == "band,metric,x,value"
    assert "combined,pdr,,1.0" in lines


def test_record_lookup_by_packet_id():
    trace = make_trace([record(1, 0, 0, 10), record(1, 1, 0)])
    assert trace.record_of(PacketId(1, 1)).fate == PacketFate.RETRY_DROP
    with pytest.raises(KeyError):
        trace.record_of(PacketId(5, 0))
