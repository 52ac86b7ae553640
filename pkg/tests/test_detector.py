import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from tfsense import _kernels, detector, metrics, scenarios, signals
from tfsense.boxes import BoundingBox
from tfsense.detector import (SE_1X3, SE_3X1, SE_3X3, ConfigError, DetectorConfig, LineAxis, MorphOp,
                              PsdProfile, StructuringElement)
from tfsense.frontend import FrontendConfig, TFPlot
from tfsense.signals import Scenario, SignalSpec

import oracles
from conftest import plots_from


def masks(max_rows=12, max_cols=150):
    shapes = st.tuples(st.integers(1, max_rows), st.integers(1, max_cols))
    return shapes.flatmap(lambda s: hnp.arrays(np.bool_, s))


def random_mask(rng, t_len, f_len, density):
    return rng.random((t_len, f_len)) < density


def plot_of(rows, fs=1024.0):
    rows = np.asarray(rows, dtype=np.float32)
    return TFPlot(rows, 0, FrontendConfig(fs, rows.shape[1], rows.shape[0]))


# ---------------------------------------------------------------- PSD

def test_psd_of_zero_plot():
    assert not detector.estimate_psd(np.zeros((10, 64), np.float32)).raw.any()


def test_psd_of_one_constant_column():
    rows = np.zeros((10, 64), np.float32)
    rows[:, 7] = 3.0
    raw = detector.estimate_psd(rows).raw
    assert raw[7] == 9.0 and np.count_nonzero(raw) == 1


@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 20), st.integers(1, 40)),
                  elements=st.floats(0, 1e4, width=32)))
def test_psd_matches_double_loop(rows):
    assert np.array_equal(detector.estimate_psd(rows).raw, oracles.column_power(rows))


def test_savgol_matches_least_squares_per_window():
    seq = np.array([2.0, 3.5, 1.0, 4.0, 8.0, 6.5, 7.0, 3.0, 5.0])
    assert np.allclose(detector.savgol(seq, 5, 2), oracles.savgol_lstsq(seq, 5, 2), rtol=0, atol=1e-12)


@given(hnp.arrays(np.float64, st.integers(16, 60), elements=st.floats(-1e3, 1e3)),
       st.sampled_from([(5, 2), (7, 3), (11, 3), (15, 0)]))
def test_savgol_property(values, wo):
    w, o = wo
    assert np.allclose(detector.savgol(values, w, o), oracles.savgol_lstsq(values, w, o), rtol=1e-9, atol=1e-8)


def test_constant_profile_floor_is_constant():
    prof = detector.smooth_and_floor(PsdProfile(np.full(64, 2.5)), DetectorConfig())
    assert prof.noise_floor == pytest.approx(2.5)
    assert prof.theta_psd == pytest.approx(2.5 * 10 ** 0.3)


def test_v_profile_floor_near_minimum():
    raw = 1.0 + np.abs(np.arange(101) - 40.0)
    prof = detector.smooth_and_floor(PsdProfile(raw), DetectorConfig(savgol_window=5, savgol_order=2))
    assert prof.floor_index == pytest.approx(40, abs=1)
    assert prof.noise_floor == pytest.approx(prof.smoothed.min())
    assert 1.0 <= prof.noise_floor < 2.0


def test_lowest_local_minimum_rules():
    assert detector.lowest_local_minimum([3, 1, 3, 0.5, 2]) == (0.5, 3)
    # plateau counts once, at its first index
    assert detector.lowest_local_minimum([3, 1, 1, 1, 3]) == (1.0, 1)
    # monotone: the end is a minimum under the mirrored reading
    assert detector.lowest_local_minimum([1, 2, 3, 4]) == (1.0, 0)
    assert detector.lowest_local_minimum([5, 5, 5]) == (5.0, 0)


def test_too_few_columns_is_config_error():
    with pytest.raises(ConfigError):
        detector.smooth_and_floor(PsdProfile(np.ones(20)), DetectorConfig(savgol_window=31))


@pytest.mark.parametrize("kwargs", [dict(savgol_window=30), dict(savgol_window=5, savgol_order=5),
                                    dict(psd_margin_db=-1), dict(min_component_area=0)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        DetectorConfig(**kwargs)


@given(hnp.arrays(np.float64, 64, elements=st.floats(1e-3, 1e3)), st.floats(0, 10), st.floats(0, 10))
def test_raising_margin_never_adds_columns(raw, m1, m2):
    lo, hi = sorted((m1, m2))
    a = detector.prune_columns(detector.smooth_and_floor(PsdProfile(raw.copy()), DetectorConfig(psd_margin_db=lo)))
    b = detector.prune_columns(detector.smooth_and_floor(PsdProfile(raw.copy()), DetectorConfig(psd_margin_db=hi)))
    assert set(b) <= set(a)


def test_all_pruned_gives_no_boxes():
    rows = np.ones((50, 64), np.float32)
    prof = detector.smooth_and_floor(detector.estimate_psd(rows), DetectorConfig(savgol_window=5))
    assert detector.prune_columns(prof).size == 0
    assert detector.detect(plot_of(rows), DetectorConfig(savgol_window=5)) == []


def test_noise_only_prunes_almost_everything():
    for seed in range(3):
        sc = scenarios.noise_only(plot_height=500, seed=seed)
        x, _ = signals.synthesize(sc)
        plot = plots_from(x, FrontendConfig(sc.fs, 1024, 500))[0]
        prof = detector.smooth_and_floor(detector.estimate_psd(plot), DetectorConfig())
        assert detector.prune_columns(prof).size <= 0.05 * 1024


@pytest.fixture(scope="module")
def three_signals():
    """A 2 MHz burst, a 20 MHz block and a 30 MHz noise-like block in one 500-row plot."""
    fe = FrontendConfig(100e6, 1024, 500)
    span, n0 = fe.plot_span, scenarios.NOISE_POWER
    sigs = [SignalSpec("ofdm-like", -30e6, 2e6, 0.1 * span, 0.2 * span, signals.power_for_snr(20, 2e6, n0)),
            SignalSpec("ofdm-like", 0.0, 20e6, 0.2 * span, 0.5 * span, signals.power_for_snr(15, 20e6, n0)),
            SignalSpec("noise-like", 30e6, 30e6, 0.4 * span, 0.5 * span, signals.power_for_snr(15, 30e6, n0))]
    x, gt = signals.synthesize(Scenario(fe.fs, span, sigs, n0, seed=0))
    return plots_from(x, fe)[0], gt


def test_active_columns_cover_ground_truth(three_signals):
    plot, gt = three_signals
    prof = detector.smooth_and_floor(detector.estimate_psd(plot), DetectorConfig())
    active = set(detector.prune_columns(prof).tolist())
    cfg = plot.config
    for box in gt.boxes:
        k0, k1, _, _ = box.to_bins(cfg.n_fft, cfg.df, cfg.dt)
        assert set(range(k0, k1)) <= active


def test_three_signal_scenario_mean_iou(three_signals):
    plot, gt = three_signals
    assert metrics.evaluate(gt.boxes, detector.detect(plot)).mean_iou >= 0.55


# ---------------------------------------------------------------- Otsu / binarize

def test_otsu_two_values():
    col = np.r_[np.zeros(1000), np.full(1000, 10.0)]
    th = detector.otsu(col)
    assert 0 < th < 10
    assert np.array_equal(col > th, col == 10)


def test_otsu_constant_column():
    assert detector.otsu(np.full(50, 4.0)) is None


@given(hnp.arrays(np.float32, st.integers(1, 300), elements=st.floats(0, 1e6, width=32)))
def test_otsu_matches_exhaustive_scan(col):
    assert detector.otsu(col) == oracles.otsu_threshold(col)


def test_binarize_no_active_columns():
    rows = np.random.default_rng(0).random((20, 64)).astype(np.float32)
    assert not detector.binarize(rows, np.array([], np.int64)).any()


def test_binarize_two_valued_column():
    rows = np.zeros((20, 64), np.float32)
    rows[::3, 5] = 7.0
    mask = detector.binarize(rows, np.array([5]))
    assert np.array_equal(mask[:, 5], rows[:, 5] == 7.0)
    assert mask.sum() == mask[:, 5].sum()


@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 40), st.integers(1, 90)),
                  elements=st.floats(0, 100, width=32)), st.data())
def test_binarize_is_per_column_otsu(rows, data):
    active = np.array(sorted(data.draw(st.sets(st.integers(0, rows.shape[1] - 1)))), dtype=np.int64)
    mask = detector.binarize(rows, active)
    packed = detector.unpack(detector.binarize_packed(rows, active), rows.shape[1])
    assert np.array_equal(mask, packed)
    for c in range(rows.shape[1]):
        th = oracles.otsu_threshold(rows[:, c]) if c in active else None
        want = rows[:, c] > th if th is not None else np.zeros(rows.shape[0], bool)
        assert np.array_equal(mask[:, c], want)


# ---------------------------------------------------------------- morphology

def test_open_removes_isolated_pixel():
    m = np.zeros((7, 7), bool)
    m[3, 3] = True
    assert not detector.morphology(m, "open", SE_3X3).any()


def test_close_bridges_one_pixel_gap():
    m = np.zeros((5, 12), bool)
    m[1:4, 1:5] = True
    m[1:4, 6:10] = True
    out = detector.morphology(m, MorphOp.CLOSE, SE_3X3)
    assert out[2, 5]


@pytest.mark.parametrize("se", [SE_3X3, SE_1X3, SE_3X1, StructuringElement(5, 3)])
@given(m=masks())
def test_morphology_matches_direct_definition(se, m):
    h, w = se.shape
    assert np.array_equal(detector.erode(m, se), oracles.erode(m, h, w))
    assert np.array_equal(detector.dilate(m, se), oracles.dilate(m, h, w))
    assert np.array_equal(detector.morphology(m, "open", se), oracles.opening(m, h, w))
    assert np.array_equal(detector.morphology(m, "close", se), oracles.closing(m, h, w))


@pytest.mark.parametrize("op", ["open", "close"])
@given(m=masks())
def test_open_close_idempotent(op, m):
    once = detector.morphology(m, op, SE_3X3)
    assert np.array_equal(detector.morphology(once, op, SE_3X3), once)


@given(m=masks())
def test_dilation_erosion_duality_with_background_padding(m):
    # complementing flips the padding too, so compare on a frame wide enough to hold it
    framed = np.pad(m, 2)
    dual = ~detector.erode(~framed, SE_3X3)
    # erosion of the complement sees the out-of-image ring as background; mask it out
    ring = np.ones_like(framed)
    ring[1:-1, 1:-1] = False
    dual &= ~ring
    assert np.array_equal(detector.dilate(framed, SE_3X3), dual)


def test_consolidate_empty():
    assert not detector.consolidate(np.zeros((8, 8), bool)).any()


def test_consolidate_full_block_matches_oracle():
    full = np.ones((8, 8), bool)
    out = detector.consolidate(full)
    assert np.array_equal(out, oracles.consolidate(full))
    # only the outer one-pixel ring may be lost
    assert out[1:-1, 1:-1].all()


def test_consolidate_recovers_block_and_drops_specks():
    rng = np.random.default_rng(4)
    m = np.zeros((30, 30), bool)
    m[10:20, 10:20] = True
    for t, f in rng.integers(12, 18, size=(3, 2)):
        m[t, f] = False
    for t, f in [(2, 2), (2, 27), (27, 2), (27, 27), (5, 15)]:
        m[t, f] = True
    out = detector.consolidate(m)
    assert np.array_equal(out, oracles.consolidate(m))
    want = np.zeros_like(m)
    want[10:20, 10:20] = True
    assert np.array_equal(out, want)


@pytest.mark.parametrize("axis", list(LineAxis))
@given(m=masks(max_rows=20, max_cols=200))
def test_consolidate_matches_composed_oracle(axis, m):
    cfg = DetectorConfig(line_axis=axis)
    want = oracles.consolidate(m, line_along_freq=axis is LineAxis.FREQUENCY)
    assert np.array_equal(detector.consolidate(m, cfg), want)


def test_dependency_radius():
    assert DetectorConfig().dependency_radius == 6
    assert DetectorConfig(line_axis="time").dependency_radius == 4


# ---------------------------------------------------------------- labeling

def test_diagonal_pixels_are_two_components():
    m = np.array([[1, 0], [0, 1]], bool)
    assert detector.label(m).count == 2


def test_rectangle_is_one_component():
    m = np.zeros((10, 20), bool)
    m[2:6, 3:15] = True
    lab = detector.label(m)
    assert lab.count == 1
    assert lab.extents.tolist() == [[2, 5, 3, 14]]
    assert lab.areas.tolist() == [48]


@given(m=masks(max_rows=25, max_cols=140), min_area=st.integers(1, 6))
def test_labeling_matches_flood_fill(m, min_area):
    lab = detector.label(m, min_area)
    ref, n = oracles.flood_fill(m)
    sizes = np.bincount(ref.ravel(), minlength=n + 1)
    keep = [i for i in range(1, n + 1) if sizes[i] >= min_area]
    boxes = oracles.extents(ref, n)
    ref = np.where(np.isin(ref, keep), ref, 0)
    assert oracles.components(lab.labels) == oracles.components(ref)
    assert sorted(map(tuple, lab.extents.tolist())) == sorted(boxes[i - 1] for i in keep)
    # the packed run-based labeller finds the same components
    _, ext, areas = _kernels.run_label(detector.pack(m), m.shape[1])
    got = sorted(map(tuple, ext[areas >= min_area].tolist()))
    assert got == sorted(map(tuple, lab.extents.tolist()))


# ---------------------------------------------------------------- detect

def test_box_conversion_edges():
    fe = FrontendConfig(100e6, 1024, 10)
    plot = TFPlot(np.zeros((10, 1024), np.float32), 30, fe)
    (box,) = detector.extents_to_boxes(np.array([[2, 4, 512, 515]]), plot)
    df, dt = fe.df, fe.dt
    assert box.f0 == pytest.approx(-0.5 * df) and box.f1 == pytest.approx(3.5 * df)
    assert box.t0 == pytest.approx(32 * dt) and box.t1 == pytest.approx(35 * dt)
    assert box.to_bins(1024, df, dt, start_seq=30) == (512, 516, 2, 5)


def test_noise_only_gives_no_boxes(noise_plot):
    assert detector.detect(noise_plot) == []


def test_single_burst_one_box():
    fs, t_len = 100e6, 500
    fe = FrontendConfig(fs, 1024, t_len)
    sig = SignalSpec("ofdm-like", 10e6, 5e6, 0.2 * fe.plot_span, 0.5 * fe.plot_span,
                     signals.power_for_snr(20.0, 5e6, scenarios.NOISE_POWER))
    x, gt = signals.synthesize(Scenario(fs, fe.plot_span, [sig], scenarios.NOISE_POWER, seed=11))
    boxes = detector.detect(plots_from(x, fe)[0])
    assert len(boxes) == 1
    assert metrics.iou(boxes[0], gt.boxes[0]) >= 0.6


def test_sparse_scenario_mean_iou(sparse_small):
    plot, gt = sparse_small
    det = detector.detect(plot)
    gt_w = metrics.clip_to_window(gt.boxes, plot.t0, plot.t0 + plot.config.plot_span)
    assert metrics.evaluate(gt_w, det).mean_iou >= 0.55


def test_detect_is_deterministic(sparse_small):
    plot, _ = sparse_small
    a = detector.detect(plot)
    b = detector.detect(TFPlot(plot.rows.copy(), plot.start_seq, plot.config))
    assert a == b


def test_detect_full_exposes_stages(sparse_small):
    plot, _ = sparse_small
    res = detector.detect_full(plot)
    assert set(res.timings) == set(detector.STAGES)
    assert res.mask.shape == plot.shape
    assert res.profile.theta_psd >= res.profile.noise_floor
    # the consolidated mask relabelled from scratch gives the same boxes
    lab = detector.label(res.mask, DetectorConfig().min_component_area)
    assert sorted(lab.boxes(plot), key=lambda b: (b.t0, b.f0)) == sorted(res.boxes, key=lambda b: (b.t0, b.f0))


def test_linear_domain_smoothing_also_works(sparse_small):
    plot, _ = sparse_small
    assert detector.detect(plot, DetectorConfig(smooth_domain="linear"))
