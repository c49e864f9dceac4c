import pytest

from core import (
    DEFAULT_BAND_24GHZ,
    DEFAULT_BAND_868MHZ,
    AppConfig,
    BandId,
    asn_to_time,
    format_seconds,
    seconds_to_us,
    validate_app_config,
    validate_band_config,
)


@pytest.mark.parametrize("band", [DEFAULT_BAND_24GHZ, DEFAULT_BAND_868MHZ])
def test_asn_zero_is_time_zero(band):
    assert asn_to_time(0, band) == 0


def test_asn_to_time_uses_the_band_slot_duration():
    assert asn_to_time(100, DEFAULT_BAND_24GHZ) == 1_000_000
    assert asn_to_time(100, DEFAULT_BAND_868MHZ) == 2_938_000
    assert format_seconds(asn_to_time(100, DEFAULT_BAND_868MHZ)) == "2.938000"


def test_asn_to_time_is_exact_over_a_long_run():
    slots = seconds_to_us(7200) // DEFAULT_BAND_868MHZ.slot_duration_us
    assert asn_to_time(slots, DEFAULT_BAND_868MHZ) == slots * 29_380
    times = [asn_to_time(a, DEFAULT_BAND_868MHZ) for a in range(slots - 5, slots)]
    assert times == sorted(set(times))


def test_reference_bands():
    assert (DEFAULT_BAND_24GHZ.channel_count, DEFAULT_BAND_868MHZ.channel_count) == (16, 34)
    assert (DEFAULT_BAND_24GHZ.bitrate, DEFAULT_BAND_868MHZ.bitrate) == (250_000, 50_000)
    assert DEFAULT_BAND_24GHZ.slot_duration == 0.01
    assert DEFAULT_BAND_868MHZ.radio_sensitivity - DEFAULT_BAND_24GHZ.radio_sensitivity == -13.0


@pytest.mark.parametrize("band", [DEFAULT_BAND_24GHZ, DEFAULT_BAND_868MHZ])
def test_reference_bands_are_valid_in_strict_mode(band):
    assert validate_band_config(band, strict_paper_mode=True).is_valid


def test_strict_mode_rejects_a_16_channel_sub_ghz_band():
    band = DEFAULT_BAND_868MHZ.replace(channel_count=16)
    assert validate_band_config(band).is_valid
    result = validate_band_config(band, strict_paper_mode=True)
    assert not result.is_valid
    assert [v.split(":")[0] for v in result.violations] == ["channel_count"]


def test_zero_slot_duration_is_rejected():
    result = validate_band_config(DEFAULT_BAND_24GHZ.replace(slot_duration_us=0))
    assert not result.is_valid
    assert any(v.startswith("slot_duration_us") for v in result.violations)


def test_a_full_frame_must_fit_in_one_slot():
    slow_band = DEFAULT_BAND_24GHZ.replace(bitrate=50_000)
    assert DEFAULT_BAND_24GHZ.frame_airtime_us(127) == 4064
    assert any(v.startswith("slot_duration_us") for v in validate_band_config(slow_band).violations)


def test_sensitivity_must_be_below_tx_power():
    band = DEFAULT_BAND_24GHZ.replace(radio_sensitivity=3.0)
    assert any(v.startswith("radio_sensitivity") for v in validate_band_config(band).violations)


def test_noise_floor_must_be_below_sensitivity():
    assert DEFAULT_BAND_868MHZ.noise_floor - DEFAULT_BAND_24GHZ.noise_floor == -13.0
    band = DEFAULT_BAND_868MHZ.replace(noise_floor=-105.0)
    assert any(v.startswith("noise_floor") for v in validate_band_config(band).violations)


def test_payload_size_sets_the_frame_checked_against_the_slot():
    assert AppConfig().frame_bytes == 127
    assert validate_app_config(AppConfig(payload_size=91)).violations[0].startswith("payload_size")
    assert not validate_app_config(AppConfig(payload_size=20)).violations
    slow_band = DEFAULT_BAND_868MHZ.replace(slot_duration_us=15_000)
    assert not validate_band_config(slow_band, frame_bytes=AppConfig(payload_size=20).frame_bytes).violations
    assert validate_band_config(slow_band, frame_bytes=AppConfig().frame_bytes).violations


def test_app_config_defaults():
    app = AppConfig()
    assert (app.message_interval, app.interval_variance, app.max_retransmissions) == (10.0, 0.0, 3)
    assert (app.setup_time, app.duration, app.payload_size) == (5400.0, 7200.0, 90)
    assert app.end_time_us == 12_600_000_000
    assert validate_app_config(app).is_valid


def test_app_config_rejects_jitter_larger_than_the_interval():
    assert not validate_app_config(AppConfig(interval_variance=10.0)).is_valid


def test_format_seconds_is_exact():
    assert format_seconds(5_400_500_000) == "5400.500000"
    assert format_seconds(1) == "0.000001"


def test_band_ids_are_stable_labels():
    assert [b.value for b in BandId] == ["24ghz", "868mhz"]
