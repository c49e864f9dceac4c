from dataclasses import dataclass, field
from typing import Optional

from msf import CellUsageWindow
from propagation import WaterfallTable
from rpl import ROOT_ID, DagState, LinkEstimator, RplConfig, root_dag
from topology import Position
from tsch import MacConfig, Schedule, TxQueue


@dataclass
class NodeStats:
    generated: int = 0          # own application packets created while joined
    unjoined_drops: int = 0     # own application packets created before the node joined
    offered: int = 0            # application packets handed to the transmit queue, own and forwarded
    forwarded: int = 0          # application packets that left the queue after the next hop decoded them
    queue_drops: int = 0
    retry_drops: int = 0
    control_drops: int = 0      # DAO / DAO-ACK frames refused by a full queue


@dataclass
class NodeState:
    """
    Mutable per-band state of one node. Owned by exactly one band simulation.
    """
    node_id: int
    position: Position
    schedule: Schedule
    queue: TxQueue
    links: LinkEstimator
    dag: DagState = field(default_factory=DagState)
    neighbor_ranks: dict[int, int] = field(default_factory=dict)
    window: CellUsageWindow = field(default_factory=CellUsageWindow)
    stats: NodeStats = field(default_factory=NodeStats)
    backoff_exponent: int = 1
    backoff: int = 0
    dio_pending: bool = False
    dio_interval: int = 1
    next_dio_slotframe: Optional[int] = None
    dao_slotframe: int = 0
    next_dsn: int = 0
    last_dsn: dict[int, int] = field(default_factory=dict)

    @property
    def is_root(self) -> bool:
        return self.node_id == ROOT_ID

    @property
    def parent(self) -> Optional[int]:
        return self.dag.preferred_parent


def make_node(node_id: int, position: Position, mac: MacConfig, rpl: RplConfig, table: WaterfallTable) -> NodeState:
    node = NodeState(
        node_id=node_id,
        position=position,
        schedule=Schedule(mac.slotframe_length),
        queue=TxQueue(mac.queue_capacity),
        links=LinkEstimator(table, rpl.etx_smoothing, rpl.min_link_success),
        backoff_exponent=mac.min_backoff_exponent,
        dio_interval=rpl.dio_interval_min,
    )
    if node.is_root:
        node.dag = root_dag(rpl)
        node.next_dio_slotframe = 0
    return node
