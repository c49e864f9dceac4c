from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
from flax import struct

from core import BandId, PacketId, SimTime
from propagation import WaterfallTable, rssi_to_pdr

if TYPE_CHECKING:
    from engine import RunTrace
    from node import NodeState

log = logging.getLogger(__name__)

ROOT_ID = 0


@struct.dataclass
class RplConfig:
    min_hop_rank_increase: int = 256        # MinHopRankIncrease, rank units per unit of ETX
    root_rank: int = 256                    # rank advertised by the DAG root
    parent_switch_hysteresis: int = 192     # MRHOF PARENT_SWITCH_THRESHOLD, in rank units
    etx_smoothing: float = 0.1              # EWMA weight of the newest transmission attempt
    max_link_etx: float = 4.0               # neighbors with a worse link are never parent candidates
    min_link_success: float = 0.01          # floor of the success estimate, keeps ETX finite
    dio_interval_min: int = 1               # Trickle Imin, in slotframes
    dio_interval_max: int = 64              # Trickle Imax, in slotframes
    dio_probability: float = 0.33           # chance of broadcasting a due DIO, divided among the known neighbors
    dao_retry_interval: int = 8             # slotframes an unjoined node waits for its DAO-ACK before resending


@struct.dataclass
class DagState:
    """
    Position of a node in its band's DODAG. A rank of None stands for infinite rank (no parent yet).
    """
    rank: Optional[int] = None
    preferred_parent: Optional[int] = None
    joined: bool = False
    join_time: Optional[SimTime] = None


@struct.dataclass
class DioMessage:
    origin: int
    rank: int
    band: BandId = struct.field(pytree_node=False)


def root_dag(config: RplConfig) -> DagState:
    return DagState(rank=config.root_rank, joined=True, join_time=SimTime(0))


def rank_increment(etx: float, config: RplConfig) -> int:
    return round(config.min_hop_rank_increase * etx)


class LinkEstimator:
    """
    Per-neighbor ETX estimate of one node.

    The success probability of a link starts at the waterfall PDR of the first DIO heard from the neighbor and then
    follows an exponentially weighted moving average of unicast attempt outcomes. ETX is its inverse.
    """
    def __init__(self, table: WaterfallTable, smoothing: float, min_success: float):
        self.table = table
        self.smoothing = smoothing
        self.min_success = min_success
        self.success: dict[int, float] = {}

    def __contains__(self, neighbor: int) -> bool:
        return neighbor in self.success

    def observe_dio(self, neighbor: int, rssi: float) -> None:
        if neighbor not in self.success:
            self.success[neighbor] = max(rssi_to_pdr(rssi, self.table), self.min_success)

    def record_attempt(self, neighbor: int, delivered: bool) -> None:
        if neighbor not in self.success:
            return
        updated = (1.0 - self.smoothing) * self.success[neighbor] + self.smoothing * float(delivered)
        self.success[neighbor] = max(updated, self.min_success)

    def etx(self, neighbor: int) -> float:
        return 1.0 / self.success[neighbor] if neighbor in self.success else np.inf


def process_dio(
    node: NodeState,
    dio: DioMessage,
    etx: float,
    config: RplConfig,
    rank_ceiling: Optional[int] = None
) -> DagState:
    """
    Stores the DIO's rank in the node's neighbor table, then runs the objective function.

    :param NodeState node: Receiver of the DIO, not modified apart from its neighbor table
    :param DioMessage dio: The decoded DIO
    :param float etx: Current ETX of the link to the DIO's origin
    :param Optional[int] rank_ceiling: Highest rank the node may take, see `select_parent`
    :return DagState: The node's updated DAG state
    """
    node.neighbor_ranks[dio.origin] = dio.rank
    if node.is_root:
        return node.dag
    return select_parent(node, config, rank_ceiling, {dio.origin: etx})


def select_parent(
    node: NodeState,
    config: RplConfig,
    rank_ceiling: Optional[int] = None,
    link_etx: Optional[dict[int, float]] = None
) -> DagState:
    """
    Minimum-rank objective function with hysteresis over ETX.

    Every neighbor with a lower rank than the node and an acceptable link is a candidate at rank
    `neighbor rank + round(256 * ETX)`. A node without a parent adopts the best candidate (lowest rank, then lowest id).
    Otherwise it switches only if the best candidate beats the path through its current parent by more than the
    hysteresis, or if its current parent stopped being a candidate. The rank then follows the path through the parent,
    worse links included, but never exceeds `rank_ceiling`: a node with children stays strictly below all of them.

    :param NodeState node: The node, not modified
    :param Optional[dict[int, float]] link_etx: ETX values overriding the node's link estimates
    :return DagState: The node's updated DAG state
    """
    dag = node.dag
    if node.is_root:
        return dag
    overrides = link_etx or {}

    def etx_of(neighbor: int) -> float:
        return overrides[neighbor] if neighbor in overrides else node.links.etx(neighbor)

    candidates = {
        neighbor: rank + rank_increment(etx_of(neighbor), config)
        for neighbor, rank in node.neighbor_ranks.items()
        if etx_of(neighbor) <= config.max_link_etx and (dag.rank is None or rank < dag.rank)
    }
    if not candidates:
        return dag
    best = min(candidates, key=lambda neighbor: (candidates[neighbor], neighbor))

    parent = dag.preferred_parent
    if parent is None:
        log.debug("node %d: adopts parent %d at rank %d", node.node_id, best, candidates[best])
        parent = best
    elif best != parent and (
        parent not in candidates or candidates[best] < candidates[parent] - config.parent_switch_hysteresis
    ):
        log.debug("node %d: switches parent %d -> %d", node.node_id, parent, best)
        parent = best

    rank = candidates[parent]
    if rank_ceiling is not None:
        rank = min(rank, rank_ceiling)
    return dag.replace(preferred_parent=parent, rank=rank)


def dio_send_probability(node: NodeState, config: RplConfig) -> float:
    """Chance that a due DIO is broadcast: `dio_probability` shared among the neighbors heard so far"""
    if not node.neighbor_ranks:
        return 1.0
    return min(1.0, config.dio_probability / len(node.neighbor_ranks))


def complete_join(node: NodeState, parent: int, now: SimTime) -> DagState:
    """
    Marks the node joined once the DAO-ACK of its preferred parent arrived. The DAG state is unchanged when the
    acknowledgement comes from a node that is no longer the preferred parent.
    """
    dag = node.dag
    if dag.joined or dag.preferred_parent != parent:
        return dag
    log.debug("node %d: joined through %d at %d us", node.node_id, parent, now)
    return dag.replace(joined=True, join_time=now)


def trickle_next(slotframe: int, interval: int, rng: np.random.Generator) -> int:
    """Next DIO slotframe: a uniform point in the second half of the current Trickle interval"""
    return slotframe + 1 + int(rng.integers(interval // 2, interval))


def hop_count(trace: RunTrace, packet: PacketId) -> int:
    record = trace.record_of(packet)
    if not record.delivered:
        raise ValueError(f"{packet} was not delivered in the {trace.band.value} run")
    return record.hops


def check_loop_free(nodes: Sequence[NodeState]) -> list[str]:
    """
    Walks every parent chain: ranks must strictly decrease towards the parent and every chain of a joined node must
    end at the root.
    """
    violations = []
    for node in nodes:
        if node.is_root or node.dag.preferred_parent is None:
            continue
        current, steps = node, 0
        while not current.is_root and current.dag.preferred_parent is not None:
            parent = nodes[current.dag.preferred_parent]
            if parent.dag.rank is None or parent.dag.rank >= current.dag.rank:
                violations.append(
                    f"node {current.node_id} (rank {current.dag.rank}) has parent {parent.node_id} (rank {parent.dag.rank})"
                )
                break
            current, steps = parent, steps + 1
            if steps > len(nodes):
                violations.append(f"parent chain of node {node.node_id} does not terminate")
                break
        else:
            if node.dag.joined and not current.is_root:
                violations.append(f"joined node {node.node_id} has no path to the root")
    return violations
