"""
Slot-by-slot simulation of one band: network formation from ASN 0, application traffic from setup_time to
setup_time + duration, and the per-packet trace consumed by the sink combiner.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from flax import struct

from core import (
    AppConfig,
    BandConfig,
    BandId,
    ConfigError,
    PacketId,
    SimTime,
    asn_to_time,
    format_seconds,
    seconds_to_us,
    validate_app_config,
    validate_band_config,
)
from msf import (
    MsfConfig,
    MsfDecision,
    adapt_cells,
    check_schedule_consistency,
    delete_cell,
    negotiate_cell,
    record_cell_elapsed,
    switch_parent_cells,
)
from node import NodeState, make_node
from propagation import Medium, WaterfallTable, band_waterfall
from rpl import (
    DioMessage,
    RplConfig,
    check_loop_free,
    complete_join,
    dio_send_probability,
    process_dio,
    select_parent,
    trickle_next,
)
from topology import Topology
from tsch import (
    AttemptResult,
    Frame,
    FrameKind,
    MacConfig,
    ReceivedFrame,
    enqueue_frame,
    enqueue_packet,
    execute_slot,
    hopping_cycle,
    make_hop_sequence,
)
from utils import make_rng

log = logging.getLogger(__name__)

TRACE_FORMAT_VERSION = 1


class InvariantError(AssertionError):
    pass


class PacketFate(str, Enum):
    DELIVERED = "delivered"
    QUEUE_DROP = "queue-drop"
    RETRY_DROP = "retry-drop"
    UNJOINED_DROP = "unjoined-drop"
    IN_FLIGHT = "in-flight"


@struct.dataclass
class AppPacket:
    node: int
    packet: PacketId
    t_gen: SimTime


@struct.dataclass
class PacketRecord:
    """
    Delivery trace of one application packet in one band.

    :param tuple[int, ...] hop_attempts: Transmission attempts spent on each hop the packet reached, source hop first
    """
    packet: PacketId
    t_gen: SimTime
    fate: PacketFate = struct.field(pytree_node=False)
    t_arrival: Optional[SimTime] = None
    hop_attempts: tuple[int, ...] = ()

    @property
    def delivered(self) -> bool:
        return self.fate == PacketFate.DELIVERED

    @property
    def hops(self) -> int:
        return len(self.hop_attempts)

    @property
    def latency(self) -> Optional[SimTime]:
        return None if self.t_arrival is None else SimTime(self.t_arrival - self.t_gen)


@struct.dataclass
class NodeSummary:
    node_id: int
    joined: bool
    join_time: Optional[SimTime]
    rank: Optional[int]
    parent: Optional[int]
    generated: int
    unjoined_drops: int
    offered: int
    forwarded: int
    queue_drops: int
    retry_drops: int
    queued_at_end: int
    dedicated_tx_cells: int


@struct.dataclass
class RunTrace:
    band: BandId = struct.field(pytree_node=False)
    seed: int
    topology: Topology
    records: tuple[PacketRecord, ...]
    nodes: tuple[NodeSummary, ...]
    unjoined_at_setup: tuple[int, ...]
    setup_time: SimTime
    end_time: SimTime

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def record_of(self, packet: PacketId) -> PacketRecord:
        for record in self.records:
            if record.packet == packet:
                return record
        raise KeyError(f"{packet} is not part of the {self.band.value} trace")


@struct.dataclass
class RunConfig:
    topology: Topology
    band: BandConfig
    app: AppConfig
    waterfall: WaterfallTable                                                   # the 2.4 GHz base table
    hop_sequence: Optional[tuple[int, ...]] = None                              # derived from the seed when None
    mac: MacConfig = MacConfig()
    rpl: RplConfig = RplConfig()
    msf: MsfConfig = MsfConfig()
    app_schedule: Optional[tuple[AppPacket, ...]] = None                        # generated from the seed when None
    check_invariants: bool = False
    strict_paper_mode: bool = False


def generate_app_schedule(app: AppConfig, nodes: Sequence[int], rng: np.random.Generator) -> tuple[AppPacket, ...]:
    """
    Periodic traffic: node i creates packet k at setup_time + k * message_interval + jitter, for k below
    duration // message_interval. The jitter is uniform over +-interval_variance / 2, zero without variance.
    Sequence numbers follow generation order per node.

    :param Sequence[int] nodes: Traffic sources, i.e. every node except the root
    :return tuple[AppPacket, ...]: The schedule sorted by creation time, then node id
    """
    interval_us = app.message_interval_us
    count = app.duration_us // interval_us
    schedule = []
    for node in nodes:
        for k in range(count):
            jitter = 0
            if app.interval_variance > 0:
                jitter = seconds_to_us(rng.uniform(-app.interval_variance / 2, app.interval_variance / 2))
            t_gen = SimTime(max(app.setup_time_us + k * interval_us + jitter, 0))
            schedule.append(AppPacket(node, PacketId(node, k), t_gen))
    schedule.sort(key=lambda p: (p.t_gen, p.node, p.packet.sequence))
    return tuple(schedule)


@dataclass
class _PacketProgress:
    fate: PacketFate = PacketFate.IN_FLIGHT
    t_arrival: Optional[SimTime] = None
    hop_attempts: list[int] = field(default_factory=list)

    def attempt(self, hop_index: int) -> None:
        while len(self.hop_attempts) <= hop_index:
            self.hop_attempts.append(0)
        self.hop_attempts[hop_index] += 1


def validate_run_config(config: RunConfig) -> None:
    band_check = validate_band_config(config.band, config.strict_paper_mode, config.app.frame_bytes)
    violations = list(band_check.violations)
    violations.extend(validate_app_config(config.app).violations)
    if config.topology.num_nodes < 2:
        violations.append(f"topology: needs at least 2 nodes (got {config.topology.num_nodes})")
    if config.hop_sequence is not None and sorted(config.hop_sequence) != list(range(config.band.channel_count)):
        violations.append(f"hop_sequence: must be a permutation of 0..{config.band.channel_count - 1}")
    if config.mac.slotframe_length < 2:
        violations.append(f"slotframe_length: must be at least 2 (got {config.mac.slotframe_length})")
    if not 0 <= config.mac.min_backoff_exponent <= config.mac.max_backoff_exponent:
        violations.append("min_backoff_exponent: must lie in [0, max_backoff_exponent]")
    if violations:
        raise ConfigError("; ".join(violations))


class BandSimulation:
    """
    One band's network: nodes, medium and random streams, advanced one slot at a time by `run`.
    """
    def __init__(self, config: RunConfig) -> None:
        validate_run_config(config)
        self.config = config
        self.band = config.band
        self.app = config.app
        band_label = self.band.band_id.value
        seed = self.app.seed

        if math.gcd(config.mac.slotframe_length, self.band.channel_count) != 1:
            log.warning(
                "%s: slotframe length %d and %d channels are not coprime, a cell only visits %d channels",
                band_label, config.mac.slotframe_length, self.band.channel_count,
                hopping_cycle(config.mac.slotframe_length, self.band.channel_count)
            )

        self.hop_sequence = config.hop_sequence
        if self.hop_sequence is None:
            self.hop_sequence = make_hop_sequence(self.band.channel_count, make_rng(seed, "hop-sequence", band_label))
        self.table = band_waterfall(self.band, config.waterfall)
        self.medium = Medium(
            self.band, config.topology.distance_matrix(), self.table, make_rng(seed, "propagation", band_label)
        )
        self.mac_rng = make_rng(seed, "mac", band_label)
        self.msf_rng = make_rng(seed, "msf", band_label)

        self.nodes = [
            make_node(i, position, config.mac, config.rpl, self.table)
            for i, position in enumerate(config.topology.positions)
        ]
        self.app_schedule = config.app_schedule
        if self.app_schedule is None:
            sources = range(1, config.topology.num_nodes)
            self.app_schedule = generate_app_schedule(self.app, sources, make_rng(seed, "app-schedule"))
        self.progress = {p.packet: _PacketProgress() for p in self.app_schedule}
        if len(self.progress) != len(self.app_schedule):
            raise ConfigError("app_schedule: packet ids must be unique")

        self.children: dict[int, set[int]] = {node.node_id: set() for node in self.nodes}
        self.unjoined_at_setup: Optional[tuple[int, ...]] = None
        self._active: dict[int, list[int]] = {}
        self._cells_changed = True

    def _refresh_active(self) -> None:
        self._active = {}
        for node in self.nodes:
            for cell in node.schedule.cells:
                self._active.setdefault(cell.slot_offset, []).append(node.node_id)
        self._cells_changed = False

    def _slotframe_boundary(self, slotframe: int, now: SimTime) -> None:
        rpl = self.config.rpl
        for node in self.nodes:
            if not node.dag.joined:
                if node.parent is not None and slotframe - node.dao_slotframe >= rpl.dao_retry_interval:
                    self._send_dao(node, now, slotframe)
                continue
            if node.next_dio_slotframe is not None and slotframe >= node.next_dio_slotframe:
                if not node.is_root:
                    self._reselect_parent(node, slotframe)
                node.dio_pending |= bool(self.mac_rng.random() < dio_send_probability(node, rpl))
                node.next_dio_slotframe = trickle_next(slotframe, node.dio_interval, self.mac_rng)
                node.dio_interval = min(2 * node.dio_interval, rpl.dio_interval_max)
            if node.is_root:
                continue
            decision = adapt_cells(node, node.window, self.config.msf)
            parent = self.nodes[node.parent]
            if decision == MsfDecision.ADD:
                self._cells_changed |= negotiate_cell(node, parent, self.msf_rng, self.band.channel_count) is not None
            elif decision == MsfDecision.DELETE:
                self._cells_changed |= delete_cell(node, parent, self.msf_rng) is not None

        if self.config.check_invariants:
            violations = check_loop_free(self.nodes) + check_schedule_consistency(self.nodes)
            if violations:
                raise InvariantError(f"slotframe {slotframe}: " + "; ".join(violations))

    def _generate(self, packet: AppPacket, now: SimTime) -> None:
        node = self.nodes[packet.node]
        if not node.dag.joined:
            node.stats.unjoined_drops += 1
            self.progress[packet.packet].fate = PacketFate.UNJOINED_DROP
            return
        node.stats.generated += 1
        if not enqueue_packet(node, packet.packet, node.parent, now):
            self.progress[packet.packet].fate = PacketFate.QUEUE_DROP

    def _restart_trickle(self, node: NodeState, slotframe: int) -> None:
        node.dio_interval = self.config.rpl.dio_interval_min
        node.next_dio_slotframe = slotframe + 1

    def _refresh_neighbor_ranks(self, node: NodeState) -> None:
        """Rank changes are announced at once: the neighbor table always holds the neighbors' current ranks"""
        for neighbor in node.neighbor_ranks:
            rank = self.nodes[neighbor].dag.rank
            if rank is not None:
                node.neighbor_ranks[neighbor] = rank

    def _rank_ceiling(self, node: NodeState) -> Optional[int]:
        ranks = [self.nodes[child].dag.rank for child in self.children[node.node_id]]
        return min(ranks) - 1 if ranks else None

    def _reselect_parent(self, node: NodeState, slotframe: int) -> None:
        """Re-runs the objective function with the current link estimates before the node advertises its rank"""
        old_parent = node.parent
        self._refresh_neighbor_ranks(node)
        node.dag = select_parent(node, self.config.rpl, self._rank_ceiling(node))
        if node.parent != old_parent:
            self._change_parent(node, old_parent, slotframe)

    def _send_dao(self, node: NodeState, now: SimTime, slotframe: int) -> None:
        if node.queue.first(lambda e: e.frame.kind == FrameKind.DAO) is not None:
            return
        enqueue_frame(node, Frame(FrameKind.DAO, node.node_id), node.parent, now)
        node.dao_slotframe = slotframe

    def _change_parent(self, node: NodeState, old_parent: Optional[int], slotframe: int) -> None:
        if old_parent is not None:
            self.children[old_parent].discard(node.node_id)
        self.children[node.parent].add(node.node_id)
        for entry in list(node.queue.entries):
            if entry.destination != old_parent:
                continue
            if entry.handed_over or entry.frame.kind == FrameKind.DAO:
                node.queue.remove(entry)
                if entry.frame.kind == FrameKind.DATA:
                    node.stats.forwarded += 1
            else:
                entry.destination = node.parent
        node.window.reset()
        old = None if old_parent is None else self.nodes[old_parent]
        switch_parent_cells(node, old, self.nodes[node.parent], self.msf_rng, self.band.channel_count)
        self._cells_changed = True
        if node.dag.joined:
            self._restart_trickle(node, slotframe)

    def _handle_dio(self, reception: ReceivedFrame, now: SimTime, slotframe: int) -> None:
        node = self.nodes[reception.receiver]
        node.links.observe_dio(reception.sender, reception.rssi)
        dio = DioMessage(reception.sender, reception.frame.rank, self.band.band_id)
        old_parent = node.parent
        self._refresh_neighbor_ranks(node)
        node.dag = process_dio(
            node, dio, node.links.etx(reception.sender), self.config.rpl, self._rank_ceiling(node)
        )
        if node.parent != old_parent:
            self._change_parent(node, old_parent, slotframe)
        if not node.dag.joined and node.parent is not None:
            self._send_dao(node, now, slotframe)

    def _handle_data(self, reception: ReceivedFrame, now: SimTime) -> None:
        packet = reception.frame.packet
        progress = self.progress[packet]
        node = self.nodes[reception.receiver]
        if node.is_root:
            if progress.fate == PacketFate.IN_FLIGHT:
                progress.fate = PacketFate.DELIVERED
                progress.t_arrival = now
            return
        if node.parent is None:
            node.stats.offered += 1
            node.stats.queue_drops += 1
            progress.fate = PacketFate.QUEUE_DROP
        elif not enqueue_packet(node, packet, node.parent, now, reception.hop_index + 1):
            progress.fate = PacketFate.QUEUE_DROP

    def _dispatch(self, reception: ReceivedFrame, now: SimTime, slotframe: int) -> None:
        kind = reception.frame.kind
        if kind == FrameKind.DIO:
            self._handle_dio(reception, now, slotframe)
        elif reception.duplicate:
            return
        elif kind == FrameKind.DATA:
            self._handle_data(reception, now)
        elif kind == FrameKind.DAO:
            parent = self.nodes[reception.receiver]
            if parent.queue.first(
                lambda e: e.frame.kind == FrameKind.DAO_ACK and e.destination == reception.sender
            ) is None:
                enqueue_frame(parent, Frame(FrameKind.DAO_ACK, parent.node_id), reception.sender, now)
        elif kind == FrameKind.DAO_ACK:
            node = self.nodes[reception.receiver]
            node.dag = complete_join(node, reception.sender, now)
            if node.dag.joined and node.dag.join_time == now:
                node.window.reset()
                switch_parent_cells(node, None, self.nodes[node.parent], self.msf_rng, self.band.channel_count)
                self._cells_changed = True
                self._restart_trickle(node, slotframe)

    def run(self) -> RunTrace:
        slotframe_length = self.config.mac.slotframe_length
        setup_time, end_time = self.app.setup_time_us, self.app.end_time_us
        next_packet = 0

        asn = 0
        while (now := asn_to_time(asn, self.band)) < end_time:
            slot_offset = asn % slotframe_length
            if slot_offset == 0:
                self._slotframe_boundary(asn // slotframe_length, now)
            if self._cells_changed:
                self._refresh_active()

            if self.unjoined_at_setup is None and now >= setup_time:
                self._record_setup()
            while next_packet < len(self.app_schedule) and self.app_schedule[next_packet].t_gen <= now:
                self._generate(self.app_schedule[next_packet], now)
                next_packet += 1

            active = self._active.get(slot_offset)
            if active:
                self._run_slot(asn, now, active)
            asn += 1

        if self.unjoined_at_setup is None:
            self._record_setup()
        trace = self._build_trace()
        log.info("%s seed=%#x: %d/%d packets delivered", self.band.band_id.value, self.app.seed,
                 sum(r.delivered for r in trace.records), len(trace.records))
        return trace

    def _run_slot(self, asn: int, now: SimTime, active: list[int]) -> None:
        report = execute_slot(
            self.nodes, active, asn, self.band, self.hop_sequence, self.medium, self.mac_rng,
            self.config.mac, self.app.max_retransmissions
        )
        for node_id, cell, used in report.elapsed_tx_cells:
            record_cell_elapsed(self.nodes[node_id], cell, used)
        for outcome in report.outcomes:
            self.nodes[outcome.sender].links.record_attempt(
                outcome.destination, outcome.result == AttemptResult.DELIVERED
            )
            if outcome.frame.kind != FrameKind.DATA:
                continue
            progress = self.progress[outcome.frame.packet]
            progress.attempt(outcome.hop_index)
            if outcome.lost:
                progress.fate = PacketFate.RETRY_DROP
        slotframe = asn // self.config.mac.slotframe_length
        for reception in report.receptions:
            self._dispatch(reception, now, slotframe)

    def _record_setup(self) -> None:
        self.unjoined_at_setup = tuple(n.node_id for n in self.nodes if not n.dag.joined)
        if self.unjoined_at_setup:
            log.warning("%s: %d node(s) not joined at setup time: %s", self.band.band_id.value,
                        len(self.unjoined_at_setup), list(self.unjoined_at_setup))

    def _build_trace(self) -> RunTrace:
        records = tuple(
            PacketRecord(
                packet=p.packet,
                t_gen=p.t_gen,
                fate=self.progress[p.packet].fate,
                t_arrival=self.progress[p.packet].t_arrival,
                hop_attempts=tuple(self.progress[p.packet].hop_attempts),
            )
            for p in self.app_schedule
        )
        nodes = tuple(
            NodeSummary(
                node_id=n.node_id,
                joined=n.dag.joined,
                join_time=n.dag.join_time,
                rank=n.dag.rank,
                parent=n.parent,
                generated=n.stats.generated,
                unjoined_drops=n.stats.unjoined_drops,
                offered=n.stats.offered,
                forwarded=n.stats.forwarded,
                queue_drops=n.stats.queue_drops,
                retry_drops=n.stats.retry_drops,
                queued_at_end=sum(e.frame.kind == FrameKind.DATA for e in n.queue.entries),
                dedicated_tx_cells=len(n.schedule.tx_cells()),
            )
            for n in self.nodes
        )
        return RunTrace(
            band=self.band.band_id,
            seed=self.app.seed,
            topology=self.config.topology,
            records=records,
            nodes=nodes,
            unjoined_at_setup=self.unjoined_at_setup,
            setup_time=self.app.setup_time_us,
            end_time=self.app.end_time_us,
        )


def run_band(config: RunConfig) -> RunTrace:
    return BandSimulation(config).run()


def check_conservation(trace: RunTrace) -> list[str]:
    """
    Per node: packets offered to the queue = forwarded + queue drops + retry drops + still queued.
    Per trace: every packet has exactly one fate and delivered packets arrive no earlier than they were created.
    """
    violations = []
    for n in trace.nodes:
        if n.offered != n.forwarded + n.queue_drops + n.retry_drops + n.queued_at_end:
            violations.append(
                f"node {n.node_id}: offered {n.offered} != forwarded {n.forwarded} + queue drops {n.queue_drops} "
                f"+ retry drops {n.retry_drops} + queued {n.queued_at_end}"
            )
    if len({r.packet for r in trace.records}) != len(trace.records):
        violations.append("a packet id appears more than once")
    for r in trace.records:
        if r.delivered and (r.t_arrival is None or r.t_arrival < r.t_gen):
            violations.append(f"{r.packet}: arrival {r.t_arrival} before creation {r.t_gen}")
    generated = sum(n.generated + n.unjoined_drops for n in trace.nodes)
    if generated > len(trace.records):
        violations.append(f"nodes generated {generated} packets but the trace holds {len(trace.records)}")
    return violations


def fate_counts(trace: RunTrace) -> dict[PacketFate, int]:
    counts = {fate: 0 for fate in PacketFate}
    for r in trace.records:
        counts[r.fate] += 1
    return counts


def _format_optional_time(value: Optional[int]) -> str:
    return "-" if value is None else format_seconds(value)


def trace_header(trace: RunTrace, spec_hash: Optional[str] = None) -> str:
    fields = [f"tracefmt={TRACE_FORMAT_VERSION}", f"band={trace.band.value}", f"seed={trace.seed:#x}",
              f"nodes={trace.num_nodes}"]
    if spec_hash is not None:
        fields.append(f"spec={spec_hash}")
    return " ".join(fields)


def trace_to_text(trace: RunTrace, spec_hash: Optional[str] = None) -> str:
    """
    Line-oriented trace: a `tracefmt=1 ...` header, then one line per packet
    `pkt <src> <seq> <t_gen> <delivered> <t_arrival> <hops> <attempts per hop ...>`, times in seconds.
    """
    lines = [trace_header(trace, spec_hash)]
    for r in trace.records:
        fields = ["pkt", str(r.packet.source), str(r.packet.sequence), format_seconds(r.t_gen),
                  str(int(r.delivered)), _format_optional_time(r.t_arrival), str(r.hops)]
        fields.extend(str(a) for a in r.hop_attempts)
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def trace_to_json(trace: RunTrace, spec_hash: Optional[str] = None) -> dict:
    return {
        "tracefmt": TRACE_FORMAT_VERSION,
        "spec": spec_hash,
        "band": trace.band.value,
        "seed": f"{trace.seed:#x}",
        "setup_time_us": trace.setup_time,
        "end_time_us": trace.end_time,
        "unjoined_at_setup": list(trace.unjoined_at_setup),
        "packets": [
            {
                "src": r.packet.source,
                "seq": r.packet.sequence,
                "t_gen_us": r.t_gen,
                "fate": r.fate.value,
                "t_arrival_us": r.t_arrival,
                "hop_attempts": list(r.hop_attempts),
            }
            for r in trace.records
        ],
        "nodes": [
            {
                "id": n.node_id,
                "joined": n.joined,
                "join_time_us": n.join_time,
                "rank": n.rank,
                "parent": n.parent,
                "generated": n.generated,
                "unjoined_drops": n.unjoined_drops,
                "offered": n.offered,
                "forwarded": n.forwarded,
                "queue_drops": n.queue_drops,
                "retry_drops": n.retry_drops,
                "queued_at_end": n.queued_at_end,
                "dedicated_tx_cells": n.dedicated_tx_cells,
            }
            for n in trace.nodes
        ],
    }


def write_trace(trace: RunTrace, path: Path, spec_hash: Optional[str] = None) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(trace_to_json(trace, spec_hash), indent=2, sort_keys=True) + "\n")
    else:
        path.write_text(trace_to_text(trace, spec_hash))
