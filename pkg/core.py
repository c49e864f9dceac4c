from enum import Enum
from typing import NewType

from flax import struct

US_PER_SECOND = 1_000_000

# All simulation time is kept in integer microseconds so that slot arithmetic is exact.
SimTime = NewType("SimTime", int)
Asn = NewType("Asn", int)

DEFAULT_SEED = 0x74C2A74018BDB
SUB_GHZ_SENSITIVITY_OFFSET_DB = 13.0
MAX_FRAME_BYTES = 127
FRAME_OVERHEAD_BYTES = 37     # MAC header and FCS, 6LoWPAN IPHC and compressed UDP header


class ConfigError(ValueError):
    """Raised when a configuration is rejected before any simulation starts."""


class BandId(str, Enum):
    BAND_24GHZ = "24ghz"
    BAND_868MHZ = "868mhz"


def seconds_to_us(seconds: float) -> SimTime:
    return SimTime(round(seconds * US_PER_SECOND))


def us_to_seconds(time_us: int) -> float:
    return time_us / US_PER_SECOND


def format_seconds(time_us: int) -> str:
    """Exact decimal rendering of a microsecond timestamp, e.g. 5400500000 -> '5400.500000'"""
    seconds, micros = divmod(int(time_us), US_PER_SECOND)
    return f"{seconds}.{micros:06d}"


@struct.dataclass
class BandConfig:
    """
    PHY/MAC parameters of one radio plane.

    :param BandId band_id: Which band this plane operates in
    :param float center_frequency: Carrier frequency used for path loss, in Hz
    :param int channel_count: Number of hopping channels
    :param float channel_spacing: Spacing between adjacent channels, in Hz
    :param int bitrate: PHY bitrate in bits per second
    :param int slot_duration_us: TSCH timeslot length in microseconds
    :param float radio_sensitivity: Receiver sensitivity in dBm
    :param float tx_power: Transmit power in dBm
    :param float noise_floor: Background noise in dBm
    """
    band_id: BandId = struct.field(pytree_node=False)
    center_frequency: float
    channel_count: int
    channel_spacing: float
    bitrate: int
    slot_duration_us: int
    radio_sensitivity: float
    tx_power: float = 0.0
    noise_floor: float = -105.0

    @property
    def slot_duration(self) -> float:
        return us_to_seconds(self.slot_duration_us)

    def frame_airtime_us(self, frame_bytes: int) -> int:
        return (frame_bytes * 8 * US_PER_SECOND) // self.bitrate


# IEEE 802.15.4 O-QPSK PHY with the CC2538 (OpenMote) sensitivity.
DEFAULT_BAND_24GHZ = BandConfig(
    band_id=BandId.BAND_24GHZ,
    center_frequency=2.4e9,
    channel_count=16,
    channel_spacing=5e6,
    bitrate=250_000,
    slot_duration_us=10_000,
    radio_sensitivity=-97.0,
)

# IEEE 802.15.4g SUN FSK operating mode #1 (863-870 MHz) with the CC1352R sensitivity. The noise floor sits the same
# 13 dB lower, so SINR lookups in the offset table keep 0 dB undecodable.
DEFAULT_BAND_868MHZ = BandConfig(
    band_id=BandId.BAND_868MHZ,
    center_frequency=868e6,
    channel_count=34,
    channel_spacing=200e3,
    bitrate=50_000,
    slot_duration_us=29_380,
    radio_sensitivity=-97.0 - SUB_GHZ_SENSITIVITY_OFFSET_DB,
    noise_floor=-105.0 - SUB_GHZ_SENSITIVITY_OFFSET_DB,
)

DEFAULT_BANDS = {
    BandId.BAND_24GHZ: DEFAULT_BAND_24GHZ,
    BandId.BAND_868MHZ: DEFAULT_BAND_868MHZ,
}


def asn_to_time(asn: Asn, band: BandConfig) -> SimTime:
    return SimTime(asn * band.slot_duration_us)


@struct.dataclass
class ValidationResult:
    violations: tuple[str, ...] = ()

    @property
    def is_valid(self) -> bool:
        return not self.violations


def validate_band_config(
    band: BandConfig,
    strict_paper_mode: bool = False,
    frame_bytes: int = MAX_FRAME_BYTES
) -> ValidationResult:
    """
    Checks a band configuration.

    Positivity and ordering constraints are always checked, and a frame of `frame_bytes` must fit in one slot. With
    `strict_paper_mode` the channel count, slot duration and bitrate must also match the reference configuration of
    the band.

    :return ValidationResult: One entry per violated constraint, each prefixed by the field name
    """
    violations = []
    for name in ("center_frequency", "channel_count", "channel_spacing", "bitrate", "slot_duration_us"):
        value = getattr(band, name)
        if value <= 0:
            violations.append(f"{name}: must be positive (got {value})")

    if band.radio_sensitivity >= band.tx_power:
        violations.append(
            f"radio_sensitivity: must be below tx_power ({band.radio_sensitivity} >= {band.tx_power})"
        )
    if band.noise_floor >= band.radio_sensitivity:
        violations.append(
            f"noise_floor: must be below radio_sensitivity ({band.noise_floor} >= {band.radio_sensitivity})"
        )
    if band.bitrate > 0 and band.slot_duration_us > 0:
        airtime = band.frame_airtime_us(frame_bytes)
        if airtime >= band.slot_duration_us:
            violations.append(
                f"slot_duration_us: a {frame_bytes}-byte frame needs {airtime} us at {band.bitrate} bps"
            )

    if strict_paper_mode:
        reference = DEFAULT_BANDS[band.band_id]
        for name in ("channel_count", "slot_duration_us", "bitrate"):
            if getattr(band, name) != getattr(reference, name):
                violations.append(
                    f"{name}: reference configuration requires {getattr(reference, name)} (got {getattr(band, name)})"
                )

    return ValidationResult(tuple(violations))


@struct.dataclass
class PacketId:
    source: int
    sequence: int


@struct.dataclass
class AppConfig:
    message_interval: float = 10.0          # seconds between two packets of one node
    interval_variance: float = 0.0          # width of the uniform jitter applied to creation times
    max_retransmissions: int = 3            # link-layer retries after the first attempt
    setup_time: float = 5400.0              # network formation time before traffic starts
    duration: float = 7200.0                # length of the measurement window
    payload_size: int = 90                  # UDP payload in bytes, sets the frame size checked against the slot
    seed: int = DEFAULT_SEED

    @property
    def message_interval_us(self) -> SimTime:
        return seconds_to_us(self.message_interval)

    @property
    def setup_time_us(self) -> SimTime:
        return seconds_to_us(self.setup_time)

    @property
    def duration_us(self) -> SimTime:
        return seconds_to_us(self.duration)

    @property
    def end_time_us(self) -> SimTime:
        return SimTime(self.setup_time_us + self.duration_us)

    @property
    def frame_bytes(self) -> int:
        return self.payload_size + FRAME_OVERHEAD_BYTES


def validate_app_config(app: AppConfig) -> ValidationResult:
    violations = []
    if app.message_interval <= 0:
        violations.append(f"message_interval: must be positive (got {app.message_interval})")
    if app.interval_variance < 0 or app.interval_variance >= app.message_interval:
        violations.append(f"interval_variance: must lie in [0, message_interval) (got {app.interval_variance})")
    if app.max_retransmissions < 0:
        violations.append(f"max_retransmissions: must be non-negative (got {app.max_retransmissions})")
    if app.setup_time <= 0:
        violations.append(f"setup_time: must be positive (got {app.setup_time})")
    if app.duration < 0:
        violations.append(f"duration: must be non-negative (got {app.duration})")
    if app.payload_size <= 0 or app.frame_bytes > MAX_FRAME_BYTES:
        violations.append(
            f"payload_size: must lie in [1, {MAX_FRAME_BYTES - FRAME_OVERHEAD_BYTES}] bytes (got {app.payload_size})"
        )
    if app.seed < 0:
        violations.append(f"seed: must be non-negative (got {app.seed})")
    return ValidationResult(tuple(violations))
