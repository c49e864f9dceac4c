from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import TYPE_CHECKING, Callable, Iterable, Optional, Sequence

import numpy as np
from flax import struct

from core import Asn, BandConfig, PacketId, SimTime
from propagation import Medium, Transmission

if TYPE_CHECKING:
    from engine import RunTrace
    from node import NodeState

log = logging.getLogger(__name__)


class ScheduleConflictError(ValueError):
    pass


class CellKind(str, Enum):
    SHARED_MINIMAL = "shared"
    TX_DEDICATED = "tx"
    RX_DEDICATED = "rx"


@struct.dataclass
class Cell:
    slot_offset: int
    channel_offset: int
    kind: CellKind = struct.field(pytree_node=False)
    peer: Optional[int] = struct.field(pytree_node=False, default=None)

    def __post_init__(self):
        if (self.kind == CellKind.SHARED_MINIMAL) != (self.peer is None):
            raise ValueError(f"{self.kind.value} cell with peer {self.peer}: only dedicated cells carry a peer")


MINIMAL_CELL = Cell(0, 0, CellKind.SHARED_MINIMAL)


@struct.dataclass
class MacConfig:
    slotframe_length: int = 101         # RFC 8180 default, coprime with 16 and 34 channels
    queue_capacity: int = 10            # TSCH transmit queue size, in frames
    min_backoff_exponent: int = 1       # macMinBE for shared-cell CSMA
    max_backoff_exponent: int = 7       # macMaxBE for shared-cell CSMA


class Schedule:
    """
    Slotframe of one node: at most one cell per slot offset, always including the minimal cell.
    """
    def __init__(self, slotframe_length: int):
        if slotframe_length < 2:
            raise ValueError(f"slotframe length must be at least 2, got {slotframe_length}")
        self.slotframe_length = slotframe_length
        self._cells: dict[int, Cell] = {MINIMAL_CELL.slot_offset: MINIMAL_CELL}

    @property
    def cells(self) -> tuple[Cell, ...]:
        return tuple(self._cells[slot] for slot in sorted(self._cells))

    def cell_at(self, slot_offset: int) -> Optional[Cell]:
        return self._cells.get(slot_offset)

    def add(self, cell: Cell) -> None:
        if not 0 <= cell.slot_offset < self.slotframe_length:
            raise ScheduleConflictError(f"slot offset {cell.slot_offset} outside the slotframe")
        if cell.slot_offset in self._cells:
            raise ScheduleConflictError(f"slot offset {cell.slot_offset} already holds {self._cells[cell.slot_offset]}")
        self._cells[cell.slot_offset] = cell

    def remove(self, cell: Cell) -> None:
        if cell.kind == CellKind.SHARED_MINIMAL:
            raise ScheduleConflictError("the minimal cell cannot be removed")
        if self._cells.get(cell.slot_offset) != cell:
            raise ScheduleConflictError(f"{cell} is not scheduled")
        del self._cells[cell.slot_offset]

    def tx_cells(self, peer: Optional[int] = None) -> list[Cell]:
        return [c for c in self.cells if c.kind == CellKind.TX_DEDICATED and peer in (None, c.peer)]

    def rx_cells(self, peer: Optional[int] = None) -> list[Cell]:
        return [c for c in self.cells if c.kind == CellKind.RX_DEDICATED and peer in (None, c.peer)]

    def has_tx_cell(self, peer: int) -> bool:
        return any(c.kind == CellKind.TX_DEDICATED and c.peer == peer for c in self._cells.values())

    def free_slots(self) -> set[int]:
        return set(range(self.slotframe_length)) - set(self._cells)


class FrameKind(str, Enum):
    DATA = "data"
    DIO = "dio"
    DAO = "dao"
    DAO_ACK = "dao-ack"


@struct.dataclass
class Frame:
    kind: FrameKind = struct.field(pytree_node=False)
    origin: int
    packet: Optional[PacketId] = None
    rank: Optional[int] = None


@dataclass
class QueueEntry:
    frame: Frame
    destination: int
    enqueued_at: SimTime
    dsn: int
    retries: int = 0
    handed_over: bool = False   # the receiver already decoded this frame once; further attempts are ghosts
    hop_index: int = 0


class TxQueue:
    """FIFO transmit queue with a fixed capacity"""
    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError(f"queue capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.entries: list[QueueEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def add_entry(self, entry: QueueEntry) -> bool:
        if self.full:
            return False
        self.entries.append(entry)
        return True

    def first(self, predicate: Callable[[QueueEntry], bool]) -> Optional[QueueEntry]:
        return next((e for e in self.entries if predicate(e)), None)

    def remove(self, entry: QueueEntry) -> None:
        self.entries.remove(entry)


class AttemptResult(str, Enum):
    DELIVERED = "delivered"
    ACK_MISSED = "ack-missed"
    NO_ACK = "no-ack"
    COLLISION = "collision"


@struct.dataclass
class TxAttemptOutcome:
    """
    One unicast transmission attempt.

    :param AttemptResult result: Delivered means both the frame and its acknowledgement were decoded
    :param int attempt: 1 for the first transmission of the frame on this hop, 2 for the first retry, ...
    :param bool lost: The frame was dropped after its last attempt and no receiver ever decoded it
    """
    result: AttemptResult = struct.field(pytree_node=False)
    channel: int
    asn: int
    sender: int
    destination: int
    frame: Frame
    attempt: int
    hop_index: int
    dropped: bool
    lost: bool


@struct.dataclass
class ReceivedFrame:
    receiver: int
    sender: int
    frame: Frame
    rssi: float
    hop_index: int = 0
    duplicate: bool = False


@dataclass
class SlotAction:
    node_id: int
    cell: Cell
    channel: int
    listen: bool = False
    frame: Optional[Frame] = None
    destination: Optional[int] = None
    entry: Optional[QueueEntry] = None

    @property
    def transmits(self) -> bool:
        return self.frame is not None


@dataclass
class SlotReport:
    outcomes: list[TxAttemptOutcome]
    receptions: list[ReceivedFrame]
    elapsed_tx_cells: list[tuple[int, Cell, bool]]  # (node id, cell, frame sent)


def make_hop_sequence(channel_count: int, rng: np.random.Generator) -> tuple[int, ...]:
    return tuple(int(c) for c in rng.permutation(channel_count))


def hop_channel(asn: Asn, channel_offset: int, band: BandConfig, hop_sequence: Sequence[int]) -> int:
    if len(hop_sequence) != band.channel_count:
        raise ValueError(f"hop sequence has {len(hop_sequence)} entries for {band.channel_count} channels")
    return hop_sequence[(asn + channel_offset) % band.channel_count]


def hopping_cycle(slotframe_length: int, channel_count: int) -> int:
    """Number of slotframes after which a fixed cell has visited every channel it will ever visit"""
    return channel_count // math.gcd(slotframe_length, channel_count)


def enqueue_packet(node: NodeState, packet: PacketId, destination: int, now: SimTime, hop_index: int = 0) -> bool:
    """
    Queues an application packet towards `destination`. A full queue drops the packet.

    :return bool: True when the packet was accepted
    """
    node.stats.offered += 1
    if not enqueue_frame(node, Frame(FrameKind.DATA, packet.source, packet=packet), destination, now, hop_index):
        node.stats.queue_drops += 1
        log.debug("node %d: queue full, dropped %s", node.node_id, packet)
        return False
    return True


def enqueue_frame(node: NodeState, frame: Frame, destination: int, now: SimTime, hop_index: int = 0) -> bool:
    entry = QueueEntry(frame, destination, now, dsn=node.next_dsn, hop_index=hop_index)
    if not node.queue.add_entry(entry):
        if frame.kind != FrameKind.DATA:
            node.stats.control_drops += 1
        return False
    node.next_dsn += 1
    return True


def plan_slot(node: NodeState, asn: Asn, band: BandConfig, hop_sequence: Sequence[int], mac: MacConfig) -> Optional[SlotAction]:
    """
    Decides what a node does in a slot: transmit, listen or sleep.

    Dedicated Tx cells carry the first queued frame for the cell's peer. The shared minimal cell carries, in order of
    priority, a DAO or DAO-ACK whose next hop has no dedicated cell, a pending DIO broadcast, then the first data
    frame whose next hop has no dedicated cell. Unicasts on the minimal cell are subject to CSMA backoff.
    """
    cell = node.schedule.cell_at(asn % mac.slotframe_length)
    if cell is None:
        return None
    channel = hop_channel(asn, cell.channel_offset, band, hop_sequence)

    if cell.kind == CellKind.RX_DEDICATED:
        return SlotAction(node.node_id, cell, channel, listen=True)

    if cell.kind == CellKind.TX_DEDICATED:
        entry = node.queue.first(lambda e: e.destination == cell.peer)
        if entry is None:
            return SlotAction(node.node_id, cell, channel)
        return SlotAction(node.node_id, cell, channel, frame=entry.frame, destination=entry.destination, entry=entry)

    control = node.queue.first(
        lambda e: e.frame.kind != FrameKind.DATA and not node.schedule.has_tx_cell(e.destination)
    )
    if control is None and node.dio_pending:
        return SlotAction(node.node_id, cell, channel, frame=Frame(FrameKind.DIO, node.node_id, rank=node.dag.rank))

    entry = control if control is not None else node.queue.first(lambda e: not node.schedule.has_tx_cell(e.destination))
    if entry is not None:
        if node.backoff == 0:
            return SlotAction(node.node_id, cell, channel, frame=entry.frame, destination=entry.destination, entry=entry)
        node.backoff -= 1
    return SlotAction(node.node_id, cell, channel, listen=True)


def _after_shared_attempt(node: NodeState, success: bool, mac: MacConfig, rng: np.random.Generator) -> None:
    if success:
        node.backoff_exponent = mac.min_backoff_exponent
        node.backoff = 0
    else:
        node.backoff_exponent = min(node.backoff_exponent + 1, mac.max_backoff_exponent)
        node.backoff = int(rng.integers(0, 2 ** node.backoff_exponent))


def execute_slot(
    nodes: Sequence[NodeState],
    active: Iterable[int],
    asn: Asn,
    band: BandConfig,
    hop_sequence: Sequence[int],
    medium: Medium,
    rng: np.random.Generator,
    mac: MacConfig,
    max_retransmissions: int
) -> SlotReport:
    """
    Runs one slot for every node that has a cell in it: plans actions, resolves the medium (frames, then
    acknowledgements on the reverse links) and applies the results to the transmit queues.

    A frame is dropped after 1 + max_retransmissions failed attempts.
    """
    actions = [a for a in (plan_slot(nodes[i], asn, band, hop_sequence, mac) for i in active) if a is not None]
    senders = [a for a in actions if a.transmits]
    listeners: dict[int, list[int]] = {}
    for a in actions:
        if a.listen:
            listeners.setdefault(a.channel, []).append(a.node_id)

    transmissions = [Transmission(a.node_id, a.destination, a.channel) for a in senders]
    decoded = medium.resolve(transmissions, listeners)
    busy_channels = {}
    for tx in transmissions:
        busy_channels[tx.channel] = busy_channels.get(tx.channel, 0) + 1

    unicast = [(a, receptions) for a, receptions in zip(senders, decoded) if a.destination is not None]
    acks = [Transmission(a.destination, a.node_id, a.channel) for a, receptions in unicast if receptions]
    ack_results = iter(medium.resolve_acks(acks))

    report = SlotReport([], [], [])
    for a in actions:
        if a.cell.kind == CellKind.TX_DEDICATED:
            report.elapsed_tx_cells.append((a.node_id, a.cell, a.transmits))

    for a, receptions in zip(senders, decoded):
        node = nodes[a.node_id]
        if a.destination is None:
            node.dio_pending = False
            report.receptions.extend(ReceivedFrame(r.receiver, a.node_id, a.frame, r.rssi) for r in receptions)
            continue

        entry = a.entry
        if receptions:
            receiver = nodes[a.destination]
            duplicate = receiver.last_dsn.get(a.node_id) == entry.dsn
            receiver.last_dsn[a.node_id] = entry.dsn
            report.receptions.append(
                ReceivedFrame(a.destination, a.node_id, a.frame, receptions[0].rssi, entry.hop_index, duplicate)
            )
            acked = next(ack_results)
            result = AttemptResult.DELIVERED if acked else AttemptResult.ACK_MISSED
            entry.handed_over = True
        else:
            result = AttemptResult.COLLISION if busy_channels[a.channel] > 1 else AttemptResult.NO_ACK

        attempt = entry.retries + 1
        dropped = False
        if result == AttemptResult.DELIVERED:
            node.queue.remove(entry)
        else:
            entry.retries += 1
            if entry.retries > max_retransmissions:
                node.queue.remove(entry)
                dropped = True
        if a.frame.kind == FrameKind.DATA:
            if result == AttemptResult.DELIVERED or (dropped and entry.handed_over):
                node.stats.forwarded += 1
            elif dropped:
                node.stats.retry_drops += 1
        elif dropped:
            node.stats.control_drops += 1
        if a.cell.kind == CellKind.SHARED_MINIMAL:
            _after_shared_attempt(node, result == AttemptResult.DELIVERED or dropped, mac, rng)

        report.outcomes.append(TxAttemptOutcome(
            result=result,
            channel=a.channel,
            asn=asn,
            sender=a.node_id,
            destination=a.destination,
            frame=a.frame,
            attempt=attempt,
            hop_index=entry.hop_index,
            dropped=dropped,
            lost=dropped and not entry.handed_over,
        ))
    return report


def retry_statistics(trace: RunTrace) -> tuple[int, Fraction]:
    """
    Counts every non-first transmission attempt of application packets, over all hops.

    :return (total retries, mean retries per non-root node)
    """
    total = sum(max(attempts - 1, 0) for record in trace.records for attempts in record.hop_attempts)
    non_root_nodes = max(trace.num_nodes - 1, 1)
    return total, Fraction(total, non_root_nodes)
