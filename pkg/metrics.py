"""
Delivery ratio, latency and retry metrics per band, and first-arrival combining of both bands at the DAG root.
"""
import csv
import json
import logging
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from flax import struct

from core import US_PER_SECOND, BandId, PacketId, SimTime
from engine import RunTrace
from tsch import retry_statistics

log = logging.getLogger(__name__)

METRICS_FORMAT_VERSION = 1
COMBINED = "combined"


class MetricsError(ValueError):
    pass


@struct.dataclass
class LatencyStats:
    """
    :param float mean: Mean latency in seconds, None for an empty received set
    :param tuple cdf: Exact empirical CDF as (latency seconds, cumulative probability), one point per distinct value
    """
    mean: Optional[float]
    cdf: tuple[tuple[float, float], ...] = ()


@struct.dataclass
class CombinedPacketOutcome:
    packet: PacketId
    t_gen: SimTime
    t_arrival_24: Optional[SimTime]
    t_arrival_868: Optional[SimTime]
    retries_24: int
    retries_868: int

    @property
    def delivered_24(self) -> bool:
        return self.t_arrival_24 is not None

    @property
    def delivered_868(self) -> bool:
        return self.t_arrival_868 is not None

    @property
    def delivered_any(self) -> bool:
        return self.delivered_24 or self.delivered_868

    @property
    def winning_band(self) -> Optional[BandId]:
        if self.delivered_24 and (not self.delivered_868 or self.t_arrival_24 <= self.t_arrival_868):
            return BandId.BAND_24GHZ
        if self.delivered_868:
            return BandId.BAND_868MHZ
        return None

    @property
    def t_first_arrival(self) -> Optional[SimTime]:
        if self.winning_band == BandId.BAND_24GHZ:
            return self.t_arrival_24
        return self.t_arrival_868

    @property
    def latency(self) -> Optional[SimTime]:
        first = self.t_first_arrival
        return None if first is None else SimTime(first - self.t_gen)

    @property
    def combined_retries(self) -> int:
        """Retries of the winning band; for undelivered packets, the smaller of the two"""
        winner = self.winning_band
        if winner == BandId.BAND_24GHZ:
            return self.retries_24
        if winner == BandId.BAND_868MHZ:
            return self.retries_868
        return min(self.retries_24, self.retries_868)


@struct.dataclass
class MetricsReport:
    """
    Metrics of one band, or of the combined network (band = "combined").

    :param float mean_hops: Mean hop count of delivered packets (per-band reports only)
    :param int unjoined_nodes: Nodes still unjoined at setup time (per-band reports only)
    :param tuple per_node_latency: (node id, mean latency in seconds) for every node with a delivered packet
    :param tuple winning_band_counts: (band, number of nodes) where each node counts for its lowest-latency band
    """
    band: str = struct.field(pytree_node=False)
    generated: int
    delivered: int
    pdr: float
    mean_latency: Optional[float]
    latency_cdf: tuple[tuple[float, float], ...]
    total_retries: int
    mean_retries_per_node: Fraction
    mean_hops: Optional[float] = None
    unjoined_nodes: Optional[int] = None
    per_node_latency: tuple[tuple[int, float], ...] = ()
    winning_band_counts: tuple[tuple[str, int], ...] = ()


def _pdr(delivered: int, generated: int) -> float:
    if generated == 0:
        raise MetricsError("the PDR of a run without generated packets is undefined")
    return delivered / generated


def empirical_cdf(latencies_us: Iterable[int]) -> tuple[tuple[float, float], ...]:
    values, counts = np.unique(np.asarray(list(latencies_us), dtype=np.int64), return_counts=True)
    if values.size == 0:
        return ()
    cumulative = np.cumsum(counts)
    total = int(cumulative[-1])
    return tuple((int(v) / US_PER_SECOND, int(c) / total) for v, c in zip(values, cumulative))


def _latency_stats(latencies_us: Sequence[int]) -> LatencyStats:
    if not latencies_us:
        return LatencyStats(None)
    return LatencyStats(sum(latencies_us) / len(latencies_us) / US_PER_SECOND, empirical_cdf(latencies_us))


def band_pdr(trace: RunTrace) -> float:
    return _pdr(sum(r.delivered for r in trace.records), len(trace.records))


def band_latency(trace: RunTrace) -> LatencyStats:
    return _latency_stats([r.latency for r in trace.records if r.delivered])


def mean_hop_count(trace: RunTrace) -> Optional[float]:
    hops = [r.hops for r in trace.records if r.delivered]
    return sum(hops) / len(hops) if hops else None


def _per_node_latency(pairs: Iterable[tuple[int, int]]) -> tuple[tuple[int, float], ...]:
    by_node: dict[int, list[int]] = {}
    for node, latency in pairs:
        by_node.setdefault(node, []).append(latency)
    return tuple(
        (node, sum(values) / len(values) / US_PER_SECOND) for node, values in sorted(by_node.items())
    )


def band_report(trace: RunTrace) -> MetricsReport:
    latency = band_latency(trace)
    total, mean = retry_statistics(trace)
    delivered = [r for r in trace.records if r.delivered]
    return MetricsReport(
        band=trace.band.value,
        generated=len(trace.records),
        delivered=len(delivered),
        pdr=band_pdr(trace),
        mean_latency=latency.mean,
        latency_cdf=latency.cdf,
        total_retries=total,
        mean_retries_per_node=mean,
        mean_hops=mean_hop_count(trace),
        unjoined_nodes=len(trace.unjoined_at_setup),
        per_node_latency=_per_node_latency((r.packet.source, r.latency) for r in delivered),
    )


def _retries(record) -> int:
    return sum(max(a - 1, 0) for a in record.hop_attempts)


def combine(trace24: RunTrace, trace868: RunTrace) -> tuple[list[CombinedPacketOutcome], MetricsReport]:
    """
    First-arrival combining at the DAG root: a packet counts as received when either band delivered it, at the
    earlier of its arrival times (2.4 GHz on ties). Retries follow the winning band.

    :raise MetricsError: When the traces are not a 2.4 GHz / 868 MHz pair over the same generated packets
    """
    if trace24.band != BandId.BAND_24GHZ or trace868.band != BandId.BAND_868MHZ:
        raise MetricsError(f"expected a (24ghz, 868mhz) trace pair, got ({trace24.band.value}, {trace868.band.value})")
    records868 = {r.packet: r for r in trace868.records}
    if len(records868) != len(trace24.records) or any(
        r.packet not in records868 or records868[r.packet].t_gen != r.t_gen for r in trace24.records
    ):
        raise MetricsError("the two traces were not generated from the same application schedule")

    outcomes = []
    for r24 in trace24.records:
        r868 = records868[r24.packet]
        outcomes.append(CombinedPacketOutcome(
            packet=r24.packet,
            t_gen=r24.t_gen,
            t_arrival_24=r24.t_arrival if r24.delivered else None,
            t_arrival_868=r868.t_arrival if r868.delivered else None,
            retries_24=_retries(r24),
            retries_868=_retries(r868),
        ))

    delivered = [o for o in outcomes if o.delivered_any]
    latency = _latency_stats([o.latency for o in delivered])
    total = sum(o.combined_retries for o in outcomes)
    winners = winning_band_per_node(outcomes)
    counts = {band.value: 0 for band in BandId}
    counts["unclassified"] = 0
    for band in winners.values():
        counts["unclassified" if band is None else band.value] += 1

    report = MetricsReport(
        band=COMBINED,
        generated=len(outcomes),
        delivered=len(delivered),
        pdr=_pdr(len(delivered), len(outcomes)),
        mean_latency=latency.mean,
        latency_cdf=latency.cdf,
        total_retries=total,
        mean_retries_per_node=Fraction(total, max(trace24.num_nodes - 1, 1)),
        per_node_latency=_per_node_latency((o.packet.source, o.latency) for o in delivered),
        winning_band_counts=tuple(counts.items()),
    )
    return outcomes, report


def winning_band_per_node(outcomes: Sequence[CombinedPacketOutcome]) -> dict[int, Optional[BandId]]:
    """
    For every source node, the band with the lower mean latency over the packets it delivered (2.4 GHz on ties).
    Nodes without any delivery map to None.
    """
    latencies: dict[int, dict[BandId, list[int]]] = {}
    for o in outcomes:
        per_band = latencies.setdefault(o.packet.source, {BandId.BAND_24GHZ: [], BandId.BAND_868MHZ: []})
        if o.delivered_24:
            per_band[BandId.BAND_24GHZ].append(o.t_arrival_24 - o.t_gen)
        if o.delivered_868:
            per_band[BandId.BAND_868MHZ].append(o.t_arrival_868 - o.t_gen)

    winners = {}
    for node, per_band in sorted(latencies.items()):
        means = {band: Fraction(sum(v), len(v)) for band, v in per_band.items() if v}
        winners[node] = min(means, key=lambda band: (means[band], band != BandId.BAND_24GHZ)) if means else None
    return winners


def report_to_json(report: MetricsReport) -> dict:
    return {
        "band": report.band,
        "generated": report.generated,
        "delivered": report.delivered,
        "pdr": report.pdr,
        "mean_latency_s": report.mean_latency,
        "latency_cdf": [list(point) for point in report.latency_cdf],
        "total_retries": report.total_retries,
        "mean_retries_per_node": str(report.mean_retries_per_node),
        "mean_hops": report.mean_hops,
        "unjoined_nodes": report.unjoined_nodes,
        "per_node_latency_s": {str(node): value for node, value in report.per_node_latency},
        "winning_band_counts": dict(report.winning_band_counts),
    }


def write_metrics_json(reports: Sequence[MetricsReport], path: Path, spec_hash: str) -> None:
    document = {
        "format": f"metrics/{METRICS_FORMAT_VERSION}",
        "spec": spec_hash,
        "reports": [report_to_json(r) for r in reports],
    }
    Path(path).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")


def write_metrics_csv(reports: Sequence[MetricsReport], path: Path, spec_hash: str) -> None:
    """Flat CSV: one row per scalar metric, then one row per CDF point"""
    with Path(path).open("w", newline="") as f:
        f.write(f"# format=metrics/{METRICS_FORMAT_VERSION} spec={spec_hash}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["band", "metric", "x", "value"])
        for r in reports:
            scalars = [
                ("generated", r.generated), ("delivered", r.delivered), ("pdr", r.pdr),
                ("mean_latency_s", r.mean_latency), ("total_retries", r.total_retries),
                ("mean_retries_per_node", float(r.mean_retries_per_node)), ("mean_hops", r.mean_hops),
                ("unjoined_nodes", r.unjoined_nodes),
            ]
            for name, value in scalars:
                writer.writerow([r.band, name, "", "" if value is None else value])
            for latency, probability in r.latency_cdf:
                writer.writerow([r.band, "cdf", latency, probability])
