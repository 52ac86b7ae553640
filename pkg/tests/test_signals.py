import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tfsense import scenarios, signals
from tfsense.boxes import BoundingBox
from tfsense.frontend import FrontendConfig, fft_rows
from tfsense.signals import (FormatError, GroundTruth, Scenario, SchemaError, SignalKind, SignalSpec,
                             ValidationError)

import oracles

FS = 100e6
DF = FS / 1024


def tone(cf=0.0, bw=DF, t0=0.0, dur=1e-3, power=1.0):
    return SignalSpec(SignalKind.TONE_BURST, cf, bw, t0, dur, power)


# ---------------------------------------------------------------- synthesize

def test_output_length_is_rounded_duration():
    sc = Scenario(fs=1e6, total_duration=1.0000004e-3, noise_power=1e-6)
    x, gt = signals.synthesize(sc)
    assert x.size == round(1e6 * 1.0000004e-3) == 1000
    assert x.dtype == np.complex64
    assert len(gt) == 0


def test_dc_tone_lands_in_center_bin():
    sc = Scenario(fs=FS, total_duration=8 * 1024 / FS, signals=[tone(dur=8 * 1024 / FS)])
    x, _ = signals.synthesize(sc)
    rows = fft_rows(x.reshape(8, 1024)).astype(np.float64)
    energy = rows ** 2
    assert np.all(energy[:, 512] / energy.sum(axis=1) > 1 - 1e-9)


def test_noise_only_has_no_boxes():
    x, gt = signals.synthesize(scenarios.noise_only(plot_height=10))
    assert gt.boxes == [] and gt.labels == []
    assert np.var(x) > 0


def test_mixed_scenario_box_widths_in_bins():
    sigs = [SignalSpec("tone-burst", -30e6, 2e6, 0, 1e-3, 1.0),
            SignalSpec("ofdm-like", 0.0, 20e6, 0, 1e-3, 1.0),
            SignalSpec("noise-like", 30e6, 30e6, 0, 1e-3, 1.0)]
    _, gt = signals.synthesize(Scenario(FS, 1e-3, sigs, noise_power=1e-8))
    widths = [b.width_bins(DF) for b in gt.boxes]
    assert widths == [math.ceil(2e6 / DF), math.ceil(20e6 / DF), math.ceil(30e6 / DF)]
    assert widths == [21, 205, 308]
    assert gt.labels == ["tone-burst", "ofdm-like", "noise-like"]


def test_same_seed_is_bit_identical_and_seed_matters():
    sc = scenarios.build("default", plot_height=50, seed=3)
    a, _ = signals.synthesize(sc)
    b, _ = signals.synthesize(scenarios.build("default", plot_height=50, seed=3))
    c, _ = signals.synthesize(scenarios.build("default", plot_height=50, seed=4))
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_overlapping_bands_allowed():
    sigs = [SignalSpec("ofdm-like", 0.0, 10e6, 0, 1e-4, 1.0),
            SignalSpec("noise-like", 2e6, 10e6, 0, 1e-4, 1.0)]
    _, gt = signals.synthesize(Scenario(FS, 1e-4, sigs))
    assert len(gt) == 2


@pytest.mark.parametrize("spec, field", [
    (dict(center_freq=49.5e6, bandwidth=2e6), "signals[0].center_freq"),
    (dict(bandwidth=0.0), "signals[0].bandwidth"),
    (dict(duration=-1.0), "signals[0].duration"),
    (dict(t_start=-1e-6), "signals[0].t_start"),
])
def test_invalid_spec_names_field(spec, field):
    base = dict(kind="ofdm-like", center_freq=0.0, bandwidth=1e6, t_start=0.0, duration=1e-4, power=1.0)
    base.update(spec)
    with pytest.raises(ValidationError) as err:
        signals.synthesize(Scenario(FS, 1e-3, [SignalSpec(**base)]))
    assert err.value.field == field


def test_duration_shorter_than_signals_rejected():
    with pytest.raises(ValidationError, match="total_duration"):
        Scenario(FS, 1e-4, [tone(dur=2e-4)]).validate()


def test_tone_energy_concentrates_in_its_bin():
    # tone centered on bin 600 inside AWGN; rectangular window, so energy stays put
    k = 600
    cf = (k - 512) * DF
    sc = Scenario(FS, 32 * 1024 / FS, [tone(cf, dur=32 * 1024 / FS, power=1.0)], noise_power=0.0)
    x, _ = signals.synthesize(sc)
    block = x.reshape(32, 1024)
    energy = np.array([oracles.dft_magnitudes(r) for r in block[:4]]) ** 2
    assert np.all(energy[:, k] / energy.sum(axis=1) >= 0.9)


def test_noise_like_edges_are_half_power():
    sig = SignalSpec("noise-like", 0.0, 10e6, 0, 1, 1.0)
    freqs = np.array([-5e6, 0.0, 5e6, 7e6])
    resp = signals._band_response(freqs, sig)
    assert resp == pytest.approx([0.5, 1.0, 0.5, 0.0])


# ---------------------------------------------------------------- measure_snr

def test_snr_equal_powers_is_zero_db():
    bw = 10e6
    noise = 1e-8
    sig = SignalSpec("ofdm-like", 10e6, bw, 0.0, 0.02, signals.power_for_snr(0.0, bw, noise))
    x, gt = signals.synthesize(Scenario(FS, 0.02, [sig], noise_power=noise, seed=1))
    assert signals.measure_snr(x, gt, FS)[0] == pytest.approx(0.0, abs=0.5)


def test_snr_without_noise_is_infinite():
    sc = Scenario(FS, 1e-3, [SignalSpec("ofdm-like", 0, 5e6, 0, 5e-4, 1.0)])
    x, gt = signals.synthesize(sc)
    assert np.isposinf(signals.measure_snr(x, gt, FS, noise_power=sc.noise_power)[0])
    # the blind estimate only sees window leakage, tens of dB down
    assert signals.measure_snr(x, gt, FS)[0] > 40


def test_known_and_estimated_noise_agree():
    sig = SignalSpec("ofdm-like", -10e6, 8e6, 0.0, 0.02, signals.power_for_snr(15.0, 8e6, 1e-8))
    x, gt = signals.synthesize(Scenario(FS, 0.02, [sig], noise_power=1e-8, seed=9))
    known = signals.measure_snr(x, gt, FS, noise_power=1e-8)[0]
    assert known == pytest.approx(signals.measure_snr(x, gt, FS)[0], abs=0.2)
    assert known == pytest.approx(15.0, abs=0.5)


def test_snr_of_tone_matches_closed_form():
    # tone amplitude A (complex exponential: power A^2), density N0 over the box bandwidth B
    amp, n0, bw = 0.05, 1e-8, 1e6
    power = amp ** 2
    sig = SignalSpec("tone-burst", 12.5e6, bw, 0.0, 0.1, power)
    x, gt = signals.synthesize(Scenario(FS, 0.1, [sig], noise_power=n0, seed=2))
    expected = 10 * np.log10(power / (n0 * bw))
    assert signals.measure_snr(x, gt, FS)[0] == pytest.approx(expected, abs=0.5)


@pytest.mark.parametrize("target", [14.0, 20.0])
def test_snr_calibration_within_one_db(target):
    sigs = [SignalSpec("ofdm-like", -20e6, 20e6, 0.0, 0.01, signals.power_for_snr(target, 20e6, 1e-8)),
            SignalSpec("noise-like", 25e6, 10e6, 0.0, 0.01, signals.power_for_snr(target, 10e6, 1e-8))]
    x, gt = signals.synthesize(Scenario(FS, 0.01, sigs, noise_power=1e-8, seed=5))
    assert np.all(np.abs(signals.measure_snr(x, gt, FS) - target) < 1.0)


# ---------------------------------------------------------------- .32cf files

def test_iq_byte_layout_matches_hand_encoding(tmp_path):
    vec = np.array([1 + 2j, -0.5 + 0j, 0 - 1j, 3.25 + 0.125j], dtype=np.complex64)
    path = tmp_path / "x.32cf"
    signals.write_iq(path, vec)
    expected = b"".join(
        int.to_bytes(int(np.float32(v).view(np.uint32)), 4, "little")
        for c in vec for v in (c.real, c.imag)
    )
    assert path.read_bytes() == expected
    assert len(expected) == 32


def test_eight_bytes_is_one_sample(tmp_path):
    path = tmp_path / "one.32cf"
    path.write_bytes(np.array([0.5, -0.25], dtype="<f4").tobytes())
    out = signals.read_iq(path)
    assert out.shape == (1,) and out[0] == np.complex64(0.5 - 0.25j)


def test_odd_float_count_is_format_error(tmp_path):
    path = tmp_path / "bad.32cf"
    path.write_bytes(b"\0" * 12)
    with pytest.raises(FormatError):
        signals.read_iq(path)


@given(st.lists(st.tuples(st.floats(width=32, allow_nan=False), st.floats(width=32, allow_nan=False)),
                max_size=64))
def test_iq_round_trip_is_bit_exact(tmp_path_factory, pairs):
    vec = np.array([complex(a, b) for a, b in pairs], dtype=np.complex64)
    path = tmp_path_factory.mktemp("iq") / "rt.32cf"
    signals.write_iq(path, vec)
    assert signals.read_iq(path).tobytes() == vec.tobytes()


# ---------------------------------------------------------------- ground truth files

def test_empty_gt_document(tmp_path):
    signals.write_gt(tmp_path / "gt.json", GroundTruth())
    doc = json.loads((tmp_path / "gt.json").read_text())
    assert doc["boxes"] == []
    assert signals.read_gt(tmp_path / "gt.json").boxes == []


def test_single_box_round_trips_exactly(tmp_path):
    gt = GroundTruth([BoundingBox(-1e6, 1e6, 0.001, 0.002)], ["ofdm-like"])
    signals.write_gt(tmp_path / "gt.json", gt)
    back = signals.read_gt(tmp_path / "gt.json")
    assert back.boxes == gt.boxes and back.labels == gt.labels


@pytest.mark.parametrize("key", ["t_start", "f_end", "label"])
def test_missing_gt_field_names_it(tmp_path, key):
    rec = {"label": "x", "t_start": 0.0, "t_end": 1.0, "f_start": 0.0, "f_end": 1.0}
    del rec[key]
    (tmp_path / "gt.json").write_text(json.dumps({"boxes": [rec]}))
    with pytest.raises(SchemaError) as err:
        signals.read_gt(tmp_path / "gt.json")
    assert err.value.field == f"boxes[0].{key}"


@given(st.sampled_from(scenarios.SUITE), st.integers(0, 2 ** 16))
def test_generated_gt_round_trips(tmp_path_factory, name, seed):
    sc = scenarios.build(name, plot_height=100, seed=seed)
    _, gt = signals.synthesize(Scenario(sc.fs, sc.total_duration, sc.signals[:3], 0.0, seed))
    path = tmp_path_factory.mktemp("gt") / "gt.json"
    signals.write_gt(path, gt)
    back = signals.read_gt(path)
    assert back.boxes == gt.boxes and back.labels == gt.labels


# ---------------------------------------------------------------- scenario configs

def test_scenario_config_round_trip(tmp_path):
    import yaml
    sc = scenarios.build("sparse", plot_height=100, seed=7)
    (tmp_path / "s.yaml").write_text(yaml.safe_dump(signals.scenario_to_dict(sc)))
    back = signals.load_scenario(tmp_path / "s.yaml")
    assert back == sc


def test_scenario_config_snr_converts_to_power():
    doc = {"fs": FS, "duration": 1e-3, "noise_power": 1e-8,
           "signals": [{"kind": "ofdm-like", "center_freq": 0, "bandwidth": 1e6,
                        "t_start": 0, "duration": 1e-4, "snr_db": 10}]}
    sc = signals.scenario_from_dict(doc)
    assert sc.signals[0].power == pytest.approx(1e-8 * 1e6 * 10)


def test_scenario_config_unknown_kind():
    doc = {"fs": FS, "duration": 1e-3,
           "signals": [{"kind": "chirp", "center_freq": 0, "bandwidth": 1e6,
                        "t_start": 0, "duration": 1e-4, "power": 1}]}
    with pytest.raises(ValidationError) as err:
        signals.scenario_from_dict(doc)
    assert err.value.field == "signals[0].kind"


def test_presets_render_inside_band():
    for name in scenarios.SUITE:
        sc = scenarios.build(name, plot_height=100, n_plots=2, seed=1)
        sc.validate()
        assert sc.signals, name
        fe = FrontendConfig(sc.fs, 1024, 100)
        assert sc.total_duration == pytest.approx(2 * fe.plot_span)
