"""
Pister-Hack link model: Friis free-space loss plus a uniform 0-40 dB extra loss per reception attempt, RSSI to PDR
conversion through waterfall tables, and SINR-based resolution of concurrent transmissions.
"""
import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import chex
import numpy as np
from flax import struct

from core import SUB_GHZ_SENSITIVITY_OFFSET_DB, BandConfig, BandId

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0  # m/s
PISTER_HACK_LOWER_SHIFT = 40.0  # dB

ArrayLike = Union[float, np.ndarray]


class WaterfallError(ValueError):
    pass


def friis_path_loss(distance: ArrayLike, frequency: float) -> ArrayLike:
    """
    Free-space path loss 20 log10(4 pi d / lambda), in dB. Accepts scalars or arrays of distances.
    """
    if frequency <= 0:
        raise ValueError(f"frequency must be positive, got {frequency}")
    if np.any(np.asarray(distance) <= 0):
        raise ValueError("distance must be positive")
    wavelength = SPEED_OF_LIGHT / frequency
    return 20.0 * np.log10(4.0 * np.pi * np.asarray(distance, dtype=np.float64) / wavelength)


def sample_rssi(distance: float, band: BandConfig, rng: np.random.Generator) -> float:
    return rssi_from_loss(float(friis_path_loss(distance, band.center_frequency)), band, rng)


def rssi_from_loss(friis_loss: float, band: BandConfig, rng: np.random.Generator,
                   spread: float = PISTER_HACK_LOWER_SHIFT) -> float:
    return band.tx_power - (friis_loss + rng.uniform(0.0, spread))


@struct.dataclass
class WaterfallTable:
    """
    Piecewise-linear RSSI to PDR mapping.

    The base anchors are stored unshifted together with a sensitivity offset; looking up `rssi` in a table with
    offset `o` evaluates the base curve at `rssi + o`. Offsetting therefore never touches the anchor values, which
    keeps the shift identity exact in floating point.

    :param tuple[float, ...] base_rssi: Strictly increasing anchor RSSI values, in dBm
    :param tuple[float, ...] pdr: Non-decreasing PDR at each anchor, from 0.0 to 1.0
    :param float offset: Sensitivity gain in dB; anchors are effectively at base_rssi - offset
    """
    base_rssi: tuple[float, ...]
    pdr: tuple[float, ...]
    offset: float = 0.0

    def __post_init__(self):
        rssi, pdr = np.asarray(self.base_rssi, dtype=np.float64), np.asarray(self.pdr, dtype=np.float64)
        if rssi.ndim != 1 or rssi.shape != pdr.shape or rssi.size < 2:
            raise WaterfallError("a waterfall table needs at least two (rssi, pdr) anchors")
        if np.any(np.diff(rssi) <= 0):
            raise WaterfallError("anchor rssi values must be strictly increasing")
        if np.any(np.diff(pdr) < 0):
            raise WaterfallError("anchor pdr values must be non-decreasing")
        if pdr[0] != 0.0 or pdr[-1] != 1.0:
            raise WaterfallError("a waterfall table must start at pdr 0.0 and end at pdr 1.0")

    @property
    def anchors(self) -> tuple[tuple[float, float], ...]:
        """Effective (rssi, pdr) anchors with the offset applied"""
        return tuple((r - self.offset, p) for r, p in zip(self.base_rssi, self.pdr))


def default_waterfall() -> WaterfallTable:
    """2.4 GHz table rising linearly from (-97 dBm, 0.0) to (-83 dBm, 1.0) in 1 dB steps"""
    rssi = tuple(float(r) for r in range(-97, -82))
    return WaterfallTable(rssi, tuple((r + 97.0) / 14.0 for r in rssi))


def rssi_to_pdr(rssi: ArrayLike, table: WaterfallTable) -> ArrayLike:
    value = np.interp(np.asarray(rssi, dtype=np.float64) + table.offset, table.base_rssi, table.pdr, left=0.0, right=1.0)
    return float(value) if np.ndim(value) == 0 else value


def offset_table(table: WaterfallTable, offset: float) -> WaterfallTable:
    """Shifts every anchor by -offset dB: a more sensitive radio reaches the same PDR at lower RSSI"""
    return table.replace(offset=table.offset + offset)


def band_waterfall(band: BandConfig, base: WaterfallTable) -> WaterfallTable:
    """The table of a band: the 2.4 GHz table itself, or the same table offset by 13 dB for 868 MHz"""
    if band.band_id == BandId.BAND_868MHZ:
        return offset_table(base, SUB_GHZ_SENSITIVITY_OFFSET_DB)
    return base


def load_waterfall(path: Path) -> WaterfallTable:
    rssi, pdr = [], []
    for line_number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 2:
            raise WaterfallError(f"{path}:{line_number}: expected '<rssi_dbm> <pdr>'")
        rssi.append(float(fields[0]))
        pdr.append(float(fields[1]))
    return WaterfallTable(tuple(rssi), tuple(pdr))


def save_waterfall(table: WaterfallTable, path: Path) -> None:
    Path(path).write_text("".join(f"{r!r} {p!r}\n" for r, p in table.anchors))


def sinr_db(signal_rssi: float, interferer_rssis: Sequence[float], noise_floor: float) -> float:
    interference_mw = sum(10.0 ** (i / 10.0) for i in interferer_rssis) + 10.0 ** (noise_floor / 10.0)
    return signal_rssi - 10.0 * np.log10(interference_mw)


def sinr_reception(
    signal_rssi: float,
    interferer_rssis: Sequence[float],
    noise_floor: float,
    table: WaterfallTable,
    rng: np.random.Generator
) -> bool:
    """
    Bernoulli reception draw. The SINR is looked up in the waterfall table as a level above the noise floor, so
    with no interferers the lookup reduces to the signal RSSI itself.
    """
    pdr = rssi_to_pdr(noise_floor + sinr_db(signal_rssi, interferer_rssis, noise_floor), table)
    return bool(rng.random() < pdr)


@struct.dataclass
class Transmission:
    """One frame on the air: `receiver` is None for broadcasts"""
    sender: int
    receiver: Optional[int]
    channel: int


@struct.dataclass
class Reception:
    receiver: int
    rssi: float


class Medium:
    """
    Resolves the transmissions of one band, one slot at a time.

    Path loss between every pair of nodes is computed once; each (transmitter, receiver) pair then gets a fresh
    Pister-Hack draw per slot. Only same-slot, same-channel transmitters of this band interfere.
    """
    def __init__(
        self,
        band: BandConfig,
        distances: np.ndarray,
        table: WaterfallTable,
        rng: np.random.Generator,
        loss_spread: float = PISTER_HACK_LOWER_SHIFT
    ):
        chex.assert_rank(distances, 2)
        self.band = band
        self.table = table
        self.rng = rng
        self.loss_spread = loss_spread

        num_nodes = distances.shape[0]
        safe = np.where(np.eye(num_nodes, dtype=bool), 1.0, distances)
        if np.any(safe <= 0):
            raise ValueError("two distinct nodes share the same position")
        self.friis = friis_path_loss(safe, band.center_frequency)

    def draw_rssi(self, sender: int, receiver: int) -> float:
        return rssi_from_loss(self.friis[sender, receiver], self.band, self.rng, self.loss_spread)

    def resolve(
        self,
        transmissions: Sequence[Transmission],
        listeners: dict[int, Sequence[int]]
    ) -> list[list[Reception]]:
        """
        Decides which listeners decode which frames.

        A listener only decodes frames addressed to it (or broadcast), and at most one per slot: it locks onto the
        strongest candidate, which is then received against the summed power of every other transmitter on the
        channel.

        :param transmissions: Frames on the air this slot
        :param listeners: Node ids listening, keyed by physical channel
        :return list[list[Reception]]: For each transmission, the listeners that decoded it
        """
        decoded: list[list[Reception]] = [[] for _ in transmissions]
        by_channel: dict[int, list[int]] = {}
        for index, tx in enumerate(transmissions):
            by_channel.setdefault(tx.channel, []).append(index)

        for channel, indices in by_channel.items():
            for receiver in listeners.get(channel, ()):
                candidates = [i for i in indices if transmissions[i].receiver in (None, receiver)]
                if not candidates:
                    continue
                rssi = {i: self.draw_rssi(transmissions[i].sender, receiver) for i in indices}
                best = min(candidates, key=lambda i: (-rssi[i], transmissions[i].sender))
                others = [rssi[j] for j in indices if j != best]
                if sinr_reception(rssi[best], others, self.band.noise_floor, self.table, self.rng):
                    decoded[best].append(Reception(receiver, rssi[best]))
        return decoded

    def resolve_acks(self, acks: Sequence[Transmission]) -> list[bool]:
        """Acknowledgements sent back in the same slot; concurrent acks on one channel interfere"""
        delivered = []
        for ack in acks:
            rssi = self.draw_rssi(ack.sender, ack.receiver)
            others = [
                self.draw_rssi(other.sender, ack.receiver)
                for other in acks if other is not ack and other.channel == ack.channel
            ]
            delivered.append(sinr_reception(rssi, others, self.band.noise_floor, self.table, self.rng))
        return delivered
