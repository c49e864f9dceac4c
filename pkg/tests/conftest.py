from typing import Optional, Sequence

import pytest

from core import BandId, PacketId, SimTime
from engine import NodeSummary, PacketFate, PacketRecord, RunTrace
from node import NodeState, make_node
from propagation import WaterfallTable, default_waterfall
from rpl import RplConfig
from topology import Position, Topology
from tsch import MacConfig

# PDR 0 for every reachable RSSI
UNREACHABLE_TABLE = WaterfallTable((100.0, 101.0), (0.0, 1.0))


def two_node_topology() -> Topology:
    return Topology(100.0, (Position(50.0, 50.0), Position(50.0, 51.0)))


def new_node(node_id: int, position: Position = Position(0.0, 0.0), table: Optional[WaterfallTable] = None,
             mac: MacConfig = MacConfig(), rpl: RplConfig = RplConfig()) -> NodeState:
    return make_node(node_id, position, mac, rpl, default_waterfall() if table is None else table)


def record(source: int, sequence: int, t_gen_us: int, t_arrival_us: Optional[int] = None,
           hop_attempts: Sequence[int] = (1,), fate: Optional[PacketFate] = None) -> PacketRecord:
    if fate is None:
        fate = PacketFate.DELIVERED if t_arrival_us is not None else PacketFate.RETRY_DROP
    return PacketRecord(PacketId(source, sequence), SimTime(t_gen_us), fate, t_arrival_us, tuple(hop_attempts))


def make_trace(records: Sequence[PacketRecord], num_nodes: int = 2, band: BandId = BandId.BAND_24GHZ,
               unjoined: Sequence[int] = ()) -> RunTrace:
    nodes = tuple(
        NodeSummary(i, True, SimTime(0), 256 * (i + 1), None if i == 0 else 0, 0, 0, 0, 0, 0, 0, 0, 0)
        for i in range(num_nodes)
    )
    topology = Topology(100.0, tuple(Position(float(i), 0.0) for i in range(num_nodes)))
    return RunTrace(band, 1, topology, tuple(records), nodes, tuple(unjoined), SimTime(0), SimTime(10**9))


@pytest.fixture
def perfect_pair() -> tuple[NodeState, NodeState]:
    """Root and a child 1 m away: every frame and ack is decoded under the default table"""
    topology = two_node_topology()
    return new_node(0, topology.positions[0]), new_node(1, topology.positions[1])
