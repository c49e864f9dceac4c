import logging
import math
from enum import Enum
from pathlib import Path
from typing import Optional

import chex
import numpy as np
from flax import struct
from scipy.spatial.distance import cdist

from core import BandConfig
from propagation import friis_path_loss

log = logging.getLogger(__name__)

DEFAULT_RESAMPLE_BUDGET = 1000


class TopologyError(ValueError):
    pass


class Deployment(str, Enum):
    LINEAR = "linear"
    RANDOM = "random"


@struct.dataclass
class Position:
    x: float
    y: float


@struct.dataclass
class Topology:
    """
    Node placement in a square deployment area. Node 0 is the DAG root and sits at the center.

    :param float side_length: Side L of the square area, in meters
    :param tuple[Position, ...] positions: Position of each node, indexed by node id
    """
    side_length: float
    positions: tuple[Position, ...]

    @property
    def num_nodes(self) -> int:
        return len(self.positions)

    def coordinates(self) -> np.ndarray:
        """Array of shape [num_nodes, 2]"""
        return np.array([(p.x, p.y) for p in self.positions], dtype=np.float64)

    def distance_matrix(self) -> np.ndarray:
        """Pairwise distances of shape [num_nodes, num_nodes]; the diagonal is zero"""
        coordinates = self.coordinates()
        return cdist(coordinates, coordinates)


def _center(side_length: float) -> Position:
    return Position(side_length / 2, side_length / 2)


def generate_linear(n: int, side_length: float) -> Topology:
    """
    Places the root at the center and the n - 1 other nodes on a uniform grid with ceil(sqrt(n - 1)) columns.

    The grid cell nearest the center is left vacant whenever the grid has a spare cell, and always when that cell
    coincides with the root position (an extra row is added if needed).
    """
    if n < 2:
        raise TopologyError(f"a linear deployment needs at least 2 nodes, got {n}")
    if side_length <= 0:
        raise TopologyError(f"side length must be positive, got {side_length}")

    num_grid_nodes = n - 1
    columns = math.ceil(math.sqrt(num_grid_nodes))
    rows = math.ceil(num_grid_nodes / columns)
    while True:
        cells = [(i, j) for j in range(rows) for i in range(columns)]
        # Twice the offset from the center, in units of grid spacing: exact integers.
        nearest = min(cells, key=lambda c: ((2 * c[0] + 1 - columns) / columns) ** 2 + ((2 * c[1] + 1 - rows) / rows) ** 2)
        on_center = (2 * nearest[0] + 1 == columns) and (2 * nearest[1] + 1 == rows)
        vacate = len(cells) > num_grid_nodes or on_center
        if len(cells) - int(vacate) >= num_grid_nodes:
            break
        rows += 1

    if vacate:
        cells.remove(nearest)
    dx, dy = side_length / columns, side_length / rows
    positions = [_center(side_length)]
    positions.extend(Position((i + 0.5) * dx, (j + 0.5) * dy) for i, j in cells[:num_grid_nodes])
    return Topology(side_length, tuple(positions))


def _best_case_rssi(distances: np.ndarray, band: BandConfig) -> np.ndarray:
    """Friis-only RSSI; zero distances map to -inf so that co-located nodes never count as neighbors"""
    rssi = np.full(distances.shape, -np.inf)
    positive = distances > 0
    rssi[positive] = band.tx_power - friis_path_loss(distances[positive], band.center_frequency)
    return rssi


def generate_random(
    n: int,
    side_length: float,
    rng: np.random.Generator,
    band: BandConfig,
    connect_threshold: Optional[float] = None,
    resample_budget: int = DEFAULT_RESAMPLE_BUDGET
) -> Topology:
    """
    Places the root at the center and every other node uniformly in the square, resampling a node until it has at
    least one already-placed neighbor whose Friis-only RSSI reaches `connect_threshold`.

    :param np.random.Generator rng: Topology stream; the result is a pure function of its state
    :param float connect_threshold: Minimum best-case RSSI in dBm, defaults to the band's radio sensitivity
    :param int resample_budget: Attempts allowed per node before giving up
    """
    if n < 2:
        raise TopologyError(f"a random deployment needs at least 2 nodes, got {n}")
    if side_length <= 0:
        raise TopologyError(f"side length must be positive, got {side_length}")
    threshold = band.radio_sensitivity if connect_threshold is None else connect_threshold

    placed = np.zeros((n, 2), dtype=np.float64)
    placed[0] = (side_length / 2, side_length / 2)
    for node_id in range(1, n):
        for _ in range(resample_budget):
            candidate = rng.uniform(0.0, side_length, size=2)
            distances = np.hypot(*(placed[:node_id] - candidate).T)
            if np.any(_best_case_rssi(distances, band) >= threshold):
                placed[node_id] = candidate
                break
        else:
            raise TopologyError(
                f"node {node_id} found no neighbor above {threshold} dBm after {resample_budget} attempts"
            )

    positions = tuple(Position(float(x), float(y)) for x, y in placed)
    return Topology(float(side_length), positions)


def connectivity_report(topology: Topology, band: BandConfig) -> np.ndarray:
    """
    :return np.ndarray: Array of shape [num_nodes] holding, for each node, the best Friis-only RSSI to any other node
    """
    distances = topology.distance_matrix()
    chex.assert_shape(distances, (topology.num_nodes, topology.num_nodes))
    np.fill_diagonal(distances, 0.0)
    return _best_case_rssi(distances, band).max(axis=1)


def save_topology(topology: Topology, path: Path) -> None:
    lines = [f"L={topology.side_length!r}"]
    lines.extend(f"{node_id} {p.x!r} {p.y!r}" for node_id, p in enumerate(topology.positions))
    Path(path).write_text("\n".join(lines) + "\n")


def load_topology(path: Path) -> Topology:
    lines = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    if not lines or not lines[0].startswith("L="):
        raise TopologyError(f"{path}: expected an 'L=<meters>' header")
    side_length = float(lines[0][2:])

    positions: dict[int, Position] = {}
    for line in lines[1:]:
        fields = line.split()
        if len(fields) != 3:
            raise TopologyError(f"{path}: malformed line {line!r}")
        positions[int(fields[0])] = Position(float(fields[1]), float(fields[2]))

    if sorted(positions) != list(range(len(positions))):
        raise TopologyError(f"{path}: node ids must be 0..{len(positions) - 1}")
    topology = Topology(side_length, tuple(positions[i] for i in range(len(positions))))
    for node_id, p in enumerate(topology.positions):
        if not (0 <= p.x <= side_length and 0 <= p.y <= side_length):
            raise TopologyError(f"{path}: node {node_id} lies outside the {side_length} m square")
    return topology


def build_topology(
    deployment: Deployment,
    n: int,
    side_length: float,
    rng: np.random.Generator,
    band: BandConfig
) -> Topology:
    if deployment == Deployment.LINEAR:
        return generate_linear(n, side_length)
    return generate_random(n, side_length, rng, band)
