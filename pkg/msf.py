from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
from flax import struct

from tsch import Cell, CellKind

if TYPE_CHECKING:
    from node import NodeState

log = logging.getLogger(__name__)


@struct.dataclass
class MsfConfig:
    max_num_cells: int = 64                 # MAX_NUM_CELLS, elapsed cell instances per adaptation window
    lim_num_cells_used_high: float = 0.75   # add a cell above this usage ratio
    lim_num_cells_used_low: float = 0.25    # delete a cell below this usage ratio


class MsfDecision(str, Enum):
    ADD = "add"
    DELETE = "delete"
    NONE = "none"


@dataclass
class CellUsageWindow:
    window_length: int = 0
    used: int = 0

    def record(self, used: bool) -> None:
        self.window_length += 1
        self.used += int(used)

    def reset(self) -> None:
        self.window_length = 0
        self.used = 0


def record_cell_elapsed(node: NodeState, cell: Cell, used: bool) -> None:
    """Counts one elapsed dedicated Tx cell to the node's preferred parent"""
    if cell.kind == CellKind.TX_DEDICATED and cell.peer == node.dag.preferred_parent:
        node.window.record(used)


def adapt_cells(node: NodeState, window: CellUsageWindow, config: MsfConfig) -> MsfDecision:
    """
    Usage-driven cell adaptation towards the preferred parent, evaluated once the window holds `max_num_cells`
    elapsed cells. The window restarts whenever a decision is taken.
    """
    if window.window_length < config.max_num_cells:
        return MsfDecision.NONE
    ratio = window.used / window.window_length
    window.reset()
    if ratio > config.lim_num_cells_used_high:
        return MsfDecision.ADD
    if ratio < config.lim_num_cells_used_low and len(node.schedule.tx_cells(node.dag.preferred_parent)) > 1:
        return MsfDecision.DELETE
    return MsfDecision.NONE


def negotiate_cell(a: NodeState, b: NodeState, rng: np.random.Generator, channel_count: int) -> Optional[Cell]:
    """
    6P ADD between `a` (transmitter) and `b` (receiver): picks a uniformly random slot offset free in both schedules
    and a uniformly random channel offset, then installs the Tx cell at `a` and the matching Rx cell at `b`.

    :return Cell: The Tx cell installed at `a`, or None when no slot offset is free on both sides
    """
    free = sorted(a.schedule.free_slots() & b.schedule.free_slots())
    if not free:
        log.debug("6P ADD %d -> %d failed: no common free slot", a.node_id, b.node_id)
        return None
    slot_offset = free[int(rng.integers(len(free)))]
    channel_offset = int(rng.integers(channel_count))
    tx_cell = Cell(slot_offset, channel_offset, CellKind.TX_DEDICATED, peer=b.node_id)
    a.schedule.add(tx_cell)
    b.schedule.add(Cell(slot_offset, channel_offset, CellKind.RX_DEDICATED, peer=a.node_id))
    log.debug("6P ADD %d -> %d at (%d, %d)", a.node_id, b.node_id, slot_offset, channel_offset)
    return tx_cell


def remove_cell_pair(a: NodeState, b: NodeState, tx_cell: Cell) -> None:
    a.schedule.remove(tx_cell)
    b.schedule.remove(Cell(tx_cell.slot_offset, tx_cell.channel_offset, CellKind.RX_DEDICATED, peer=a.node_id))
    log.debug("6P DELETE %d -> %d at (%d, %d)", a.node_id, b.node_id, tx_cell.slot_offset, tx_cell.channel_offset)


def delete_cell(a: NodeState, b: NodeState, rng: np.random.Generator) -> Optional[Cell]:
    """6P DELETE of one random Tx cell from `a` to `b`, keeping at least one"""
    cells = a.schedule.tx_cells(b.node_id)
    if len(cells) <= 1:
        return None
    cell = cells[int(rng.integers(len(cells)))]
    remove_cell_pair(a, b, cell)
    return cell


def switch_parent_cells(
    node: NodeState,
    old_parent: Optional[NodeState],
    new_parent: NodeState,
    rng: np.random.Generator,
    channel_count: int
) -> Optional[Cell]:
    """
    Moves the dedicated cells of a node to its new parent: every Tx cell to the old parent is removed with its Rx
    counterpart, and one cell to the new parent is negotiated. When the negotiation fails the node keeps sending over
    the minimal cell.
    """
    if old_parent is not None:
        for cell in node.schedule.tx_cells(old_parent.node_id):
            remove_cell_pair(node, old_parent, cell)
    if node.schedule.tx_cells(new_parent.node_id):
        return node.schedule.tx_cells(new_parent.node_id)[0]
    cell = negotiate_cell(node, new_parent, rng, channel_count)
    if cell is None:
        log.warning("node %d: no dedicated cell to new parent %d, falling back to the minimal cell",
                    node.node_id, new_parent.node_id)
    return cell


def check_schedule_consistency(nodes: Sequence[NodeState]) -> list[str]:
    """Every dedicated cell must have its counterpart, same offsets, in the peer's schedule"""
    violations = []
    for node in nodes:
        for cell in node.schedule.cells:
            if cell.kind == CellKind.SHARED_MINIMAL:
                continue
            mirrored = CellKind.RX_DEDICATED if cell.kind == CellKind.TX_DEDICATED else CellKind.TX_DEDICATED
            expected = Cell(cell.slot_offset, cell.channel_offset, mirrored, peer=node.node_id)
            if nodes[cell.peer].schedule.cell_at(cell.slot_offset) != expected:
                violations.append(f"node {node.node_id}: {cell.kind.value} cell at slot {cell.slot_offset} "
                                  f"has no counterpart at node {cell.peer}")
    return violations
