from conftest import new_node

from msf import (
    CellUsageWindow,
    MsfConfig,
    MsfDecision,
    adapt_cells,
    check_schedule_consistency,
    delete_cell,
    negotiate_cell,
    switch_parent_cells,
)
from rpl import DagState
from tsch import Cell, CellKind
from utils import make_rng

CONFIG = MsfConfig()


def child_with_cells(num_cells: int):
    parent, child = new_node(0), new_node(1)
    child.dag = DagState(rank=512, preferred_parent=0, joined=True)
    rng = make_rng(8)
    for _ in range(num_cells):
        negotiate_cell(child, parent, rng, 16)
    return parent, child


def full_window(used: int) -> CellUsageWindow:
    return CellUsageWindow(window_length=CONFIG.max_num_cells, used=used)


def test_saturated_window_adds_a_cell():
    _, child = child_with_cells(1)
    assert adapt_cells(child, full_window(64), CONFIG) == MsfDecision.ADD


def test_last_cell_is_never_deleted():
    _, child = child_with_cells(1)
    assert adapt_cells(child, full_window(0), CONFIG) == MsfDecision.NONE


def test_idle_window_deletes_a_spare_cell():
    _, child = child_with_cells(2)
    assert adapt_cells(child, full_window(0), CONFIG) == MsfDecision.DELETE


def test_half_used_window_keeps_the_cells():
    _, child = child_with_cells(1)
    assert adapt_cells(child, full_window(32), CONFIG) == MsfDecision.NONE


def test_decision_waits_for_a_full_window_then_resets_it():
    _, child = child_with_cells(1)
    window = CellUsageWindow(window_length=63, used=63)
    assert adapt_cells(child, window, CONFIG) == MsfDecision.NONE
    window.record(True)
    assert adapt_cells(child, window, CONFIG) == MsfDecision.ADD
    assert (window.window_length, window.used) == (0, 0)


def test_negotiated_cell_is_installed_on_both_sides():
    a, b = new_node(1), new_node(0)
    cell = negotiate_cell(a, b, make_rng(5), 16)
    assert 1 <= cell.slot_offset <= 100 and 0 <= cell.channel_offset < 16
    assert a.schedule.tx_cells(0) == [cell]
    assert b.schedule.rx_cells(1) == [Cell(cell.slot_offset, cell.channel_offset, CellKind.RX_DEDICATED, peer=1)]
    assert check_schedule_consistency([b, a]) == []


def test_negotiation_is_deterministic_in_the_seed():
    cells = [negotiate_cell(new_node(1), new_node(0), make_rng(5), 16) for _ in range(2)]
    assert cells[0] == cells[1]


def test_negotiation_fails_on_a_saturated_schedule():
    a, b = new_node(1), new_node(0)
    for slot in range(1, 101):
        b.schedule.add(Cell(slot, 0, CellKind.RX_DEDICATED, peer=7))
    assert negotiate_cell(a, b, make_rng(5), 16) is None
    assert a.schedule.tx_cells() == []


def test_delete_keeps_one_cell():
    parent, child = child_with_cells(2)
    assert delete_cell(child, parent, make_rng(1)) is not None
    assert delete_cell(child, parent, make_rng(1)) is None
    assert len(child.schedule.tx_cells(0)) == 1
    assert check_schedule_consistency([parent, child]) == []


def test_parent_switch_moves_all_cells():
    nodes = [new_node(i) for i in range(3)]
    rng = make_rng(2)
    for _ in range(3):
        negotiate_cell(nodes[1], nodes[2], rng, 16)
    switch_parent_cells(nodes[1], nodes[2], nodes[0], rng, 16)
    assert nodes[1].schedule.tx_cells(2) == []
    assert nodes[2].schedule.rx_cells() == []
    assert len(nodes[1].schedule.tx_cells(0)) == 1
    assert check_schedule_consistency(nodes) == []


def test_missing_counterpart_is_reported():
    nodes = [new_node(i) for i in range(2)]
    nodes[1].schedule.add(Cell(7, 3, CellKind.TX_DEDICATED, peer=0))
    assert len(check_schedule_consistency(nodes)) == 1
