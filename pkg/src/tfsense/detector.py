"""Energy localization on a TF plot.

Stages, in order:

1. ``estimate_psd`` / ``smooth_and_floor`` / ``prune_columns``: time-mean power
   per column, Savitzky-Golay smoothed; the noise floor is the lowest local
   minimum and columns below ``floor + margin`` are skipped.
2. ``binarize``: per-column Otsu threshold on the surviving columns.
3. ``consolidate``: 3x3 closing, 3x3 opening, then a 3-long line opening.
4. ``label``: 4-connected components, reported as tight bin extents.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy.signal import savgol_coeffs

from . import _kernels
from .boxes import BoundingBox
from .frontend import TFPlot

logger = logging.getLogger(__name__)

# dB floor for log-domain smoothing of all-zero columns
_TINY_DB = -3000.0


class ConfigError(ValueError):
    pass


class MorphOp(str, Enum):
    ERODE = "erode"
    DILATE = "dilate"
    OPEN = "open"
    CLOSE = "close"


class LineAxis(str, Enum):
    """Orientation of the final 3-long opening."""
    FREQUENCY = "frequency"  # 1x3: along a row
    TIME = "time"            # 3x1: along a column


class SmoothDomain(str, Enum):
    DB = "db"
    LINEAR = "linear"


@dataclass(frozen=True)
class StructuringElement:
    """All-ones kernel anchored at its center; ``height`` runs along time."""
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or not (self.height % 2 and self.width % 2):
            raise ConfigError(f"structuring element must have odd dims, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def anchor(self) -> tuple[int, int]:
        return self.height // 2, self.width // 2


SE_3X3 = StructuringElement(3, 3)
SE_1X3 = StructuringElement(1, 3)
SE_3X1 = StructuringElement(3, 1)


@dataclass(frozen=True)
class DetectorConfig:
    savgol_window: int = 31
    savgol_order: int = 3
    psd_margin_db: float = 3.0
    min_component_area: int = 4
    line_axis: LineAxis = LineAxis.FREQUENCY
    smooth_domain: SmoothDomain = SmoothDomain.DB

    def __post_init__(self):
        object.__setattr__(self, "line_axis", LineAxis(self.line_axis))
        object.__setattr__(self, "smooth_domain", SmoothDomain(self.smooth_domain))
        if self.savgol_window < 1 or self.savgol_window % 2 == 0:
            raise ConfigError("savgol_window must be a positive odd number")
        if self.savgol_order < 0 or self.savgol_order >= self.savgol_window:
            raise ConfigError("savgol_order must satisfy 0 <= order < savgol_window")
        if self.psd_margin_db < 0:
            raise ConfigError("psd_margin_db must be >= 0")
        if self.min_component_area < 1:
            raise ConfigError("min_component_area must be >= 1")

    @property
    def line_se(self) -> StructuringElement:
        return SE_1X3 if self.line_axis is LineAxis.FREQUENCY else SE_3X1

    @property
    def dependency_radius(self) -> int:
        """Columns of context consolidate needs on each side of an output column."""
        return 2 * SE_3X3.anchor[1] * 2 + 2 * self.line_se.anchor[1]


@dataclass
class PsdProfile:
    raw: np.ndarray
    # per-column magnitude range, gathered in the same pass for Otsu
    col_min: np.ndarray | None = None
    col_max: np.ndarray | None = None
    smoothed: np.ndarray | None = None
    noise_floor: float | None = None
    theta_psd: float | None = None
    floor_index: int | None = None


@dataclass
class LabeledComponents:
    labels: np.ndarray
    count: int
    extents: np.ndarray  # (count, 4): min_t, max_t, min_f, max_f
    areas: np.ndarray

    def boxes(self, plot: TFPlot) -> list[BoundingBox]:
        return extents_to_boxes(self.extents, plot)


# ---------------------------------------------------------------------------
# stage 1: PSD, floor, pruning


def _rows(plot: TFPlot | np.ndarray) -> np.ndarray:
    rows = plot.rows if isinstance(plot, TFPlot) else plot
    return np.ascontiguousarray(rows, dtype=np.float32)


def column_stats(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-column ``(sum of squares, min, max)`` of a row block."""
    f_len = rows.shape[1]
    sumsq = np.empty(f_len, dtype=np.float64)
    lo = np.empty(f_len, dtype=np.float32)
    hi = np.empty(f_len, dtype=np.float32)
    _kernels.column_stats(rows, sumsq, lo, hi)
    return sumsq, lo, hi


def estimate_psd(plot: TFPlot | np.ndarray) -> PsdProfile:
    rows = _rows(plot)
    sumsq, lo, hi = column_stats(rows)
    return PsdProfile(raw=sumsq / rows.shape[0], col_min=lo, col_max=hi)


@lru_cache(maxsize=16)
def _savgol_kernel(window: int, order: int) -> np.ndarray:
    return savgol_coeffs(window, order)


def savgol(values: np.ndarray, window: int, order: int) -> np.ndarray:
    """Sliding least-squares polynomial smoothing with mirrored edges."""
    v = np.asarray(values, dtype=np.float64)
    half = window // 2
    if v.size <= half:
        raise ConfigError(f"{v.size} samples is too short for a {window}-point window")
    return np.convolve(np.pad(v, half, mode="reflect"), _savgol_kernel(window, order), mode="valid")


def lowest_local_minimum(values: np.ndarray) -> tuple[float, int]:
    """Value and index of the lowest strict local minimum.

    A flat run counts as one point located at its first index. The profile is
    read as mirror-extended, matching the smoother's edge handling, so an end
    run is a minimum when its single inner neighbour is higher. Falls back to
    the global minimum when nothing qualifies.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty profile")
    starts = np.flatnonzero(np.r_[True, v[1:] != v[:-1]])
    run_vals = v[starts]
    if run_vals.size >= 2:
        # mirror: the neighbour beyond each end run is the run next to it
        padded = np.r_[run_vals[1], run_vals, run_vals[-2]]
        is_min = (run_vals < padded[:-2]) & (run_vals < padded[2:])
        if is_min.any():
            cand = np.flatnonzero(is_min)
            best = cand[np.argmin(run_vals[cand])]
            return float(run_vals[best]), int(starts[best])
    i = int(np.argmin(v))
    return float(v[i]), i


def smooth_and_floor(profile: PsdProfile, config: DetectorConfig) -> PsdProfile:
    raw = np.asarray(profile.raw, dtype=np.float64)
    if raw.size < config.savgol_window:
        raise ConfigError(f"{raw.size} columns is fewer than savgol_window={config.savgol_window}")
    if config.smooth_domain is SmoothDomain.DB:
        # smoothing in dB keeps sharp band edges from ringing below zero
        with np.errstate(divide="ignore"):
            db = np.where(raw > 0, 10 * np.log10(raw), _TINY_DB)
        smoothed = 10 ** (savgol(db, config.savgol_window, config.savgol_order) / 10)
    else:
        smoothed = savgol(raw, config.savgol_window, config.savgol_order)
    n0, idx = lowest_local_minimum(smoothed)
    profile.smoothed = smoothed
    profile.noise_floor = n0
    profile.floor_index = idx
    profile.theta_psd = n0 * 10 ** (config.psd_margin_db / 10)
    return profile


def prune_columns(profile: PsdProfile) -> np.ndarray:
    """Sorted indices of columns whose raw power reaches ``theta_psd``."""
    if profile.theta_psd is None:
        raise ValueError("profile has no theta_psd; run smooth_and_floor first")
    return np.flatnonzero(profile.raw >= profile.theta_psd)


# ---------------------------------------------------------------------------
# stage 2: per-column Otsu


def otsu(values: np.ndarray) -> float | None:
    """Otsu threshold of one column, or None when it is constant."""
    col = np.ascontiguousarray(np.asarray(values, dtype=np.float32).reshape(-1, 1))
    if col.size == 0:
        raise ValueError("empty column")
    th = column_thresholds(col, np.zeros(1, dtype=np.int64))[0]
    return None if np.isinf(th) else float(th)


def column_thresholds(plot: TFPlot | np.ndarray, columns: np.ndarray,
                      profile: PsdProfile | None = None) -> np.ndarray:
    """Otsu thresholds for sorted ``columns`` (``inf`` marks no threshold)."""
    rows = _rows(plot)
    if profile is None or profile.col_min is None:
        _, lo, hi = column_stats(rows)
    else:
        lo, hi = profile.col_min, profile.col_max
    return _kernels.column_thresholds(rows, np.asarray(columns, dtype=np.int64), lo, hi)


def threshold_row(n_cols: int, columns: np.ndarray, th: np.ndarray) -> np.ndarray:
    """Full-width float32 threshold vector; ``inf`` outside ``columns``.

    Each float64 threshold is rounded down to float32 so that for float32
    magnitudes ``v > th32`` holds exactly when ``v > th``.
    """
    out = np.full(n_cols, np.inf, dtype=np.float32)
    th32 = th.astype(np.float32)
    over = th32 > th
    th32[over] = np.nextafter(th32[over], np.float32(-np.inf))
    out[np.asarray(columns, dtype=np.int64)] = th32
    return out


def binarize(plot: TFPlot | np.ndarray, active: np.ndarray,
             profile: PsdProfile | None = None) -> np.ndarray:
    """Foreground where a pixel exceeds its column's Otsu threshold."""
    rows = _rows(plot)
    cols = np.asarray(active, dtype=np.int64)
    th = threshold_row(rows.shape[1], cols, column_thresholds(rows, cols, profile))
    return rows > th


def binarize_packed(rows: np.ndarray, active: np.ndarray, profile: PsdProfile | None = None,
                    c0: int = 0, c1: int | None = None) -> np.ndarray:
    """Bit-packed :func:`binarize` of columns ``[c0, c1)``; bit ``c - c0`` is column ``c``."""
    c1 = rows.shape[1] if c1 is None else c1
    cols = np.asarray(active, dtype=np.int64)
    cols = cols[(cols >= c0) & (cols < c1)]
    th = threshold_row(rows.shape[1], cols, column_thresholds(rows, cols, profile))
    return pack(rows[:, c0:c1] > th[c0:c1])


# ---------------------------------------------------------------------------
# stage 3: morphology (outside the image counts as background)
#
# Masks are processed bit-packed, 64 columns per word, so a radius-1 pass is a
# handful of word operations per row.


def pack(mask: np.ndarray) -> np.ndarray:
    """(T, n) bool -> (T, ceil(n/64)) uint64, column ``c`` at bit ``c % 64`` of word ``c // 64``."""
    mask = np.asarray(mask, dtype=np.bool_)
    t_len, n_cols = mask.shape
    words = (n_cols + 63) >> 6
    packed = np.packbits(mask, axis=1, bitorder="little")
    if packed.shape[1] != words * 8:
        packed = np.pad(packed, ((0, 0), (0, words * 8 - packed.shape[1])))
    return np.ascontiguousarray(packed).view("<u8").reshape(t_len, words)


def unpack(packed: np.ndarray, n_cols: int) -> np.ndarray:
    raw = np.ascontiguousarray(packed, dtype="<u8").view(np.uint8)
    return np.unpackbits(raw, axis=1, count=n_cols, bitorder="little").view(np.bool_)


def erode(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    rt, rf = se.anchor
    return unpack(_kernels.morph_packed(pack(mask), mask.shape[1], rt, rf, False), mask.shape[1])


def dilate(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    rt, rf = se.anchor
    return unpack(_kernels.morph_packed(pack(mask), mask.shape[1], rt, rf, True), mask.shape[1])


def morphology(mask: np.ndarray, op: MorphOp | str, se: StructuringElement) -> np.ndarray:
    op = MorphOp(op)
    if op is MorphOp.ERODE:
        return erode(mask, se)
    if op is MorphOp.DILATE:
        return dilate(mask, se)
    if op is MorphOp.OPEN:
        return dilate(erode(mask, se), se)
    return erode(dilate(mask, se), se)


def consolidate_packed(packed: np.ndarray, n_cols: int, config: DetectorConfig | None = None) -> np.ndarray:
    config = config or DetectorConfig()
    return _kernels.consolidate_packed(packed, n_cols, config.line_axis is LineAxis.FREQUENCY)


def consolidate(mask: np.ndarray, config: DetectorConfig | None = None) -> np.ndarray:
    """Close 3x3, open 3x3, then open with the 3-long line element."""
    mask = np.asarray(mask, dtype=np.bool_)
    return unpack(consolidate_packed(pack(mask), mask.shape[1], config), mask.shape[1])


# ---------------------------------------------------------------------------
# stage 4: labeling


def label(mask: np.ndarray, min_component_area: int = 1) -> LabeledComponents:
    """4-connected labeling; components smaller than ``min_component_area`` are dropped.

    Surviving components are renumbered 1..n in raster order of their first pixel.
    """
    labels, n, extents, areas = _kernels.label4(np.ascontiguousarray(mask, dtype=np.bool_))
    keep = areas >= min_component_area
    if not keep.all():
        remap = np.zeros(n + 1, dtype=np.int32)
        remap[1:][keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
        labels = remap[labels]
        extents, areas = extents[keep], areas[keep]
    return LabeledComponents(labels, int(len(areas)), extents, areas)


def extents_to_boxes(extents: np.ndarray, plot: TFPlot) -> list[BoundingBox]:
    cfg = plot.config
    return [
        BoundingBox.from_bins(int(f0), int(f1) + 1, int(t0), int(t1) + 1,
                              cfg.n_fft, cfg.df, cfg.dt, plot.start_seq)
        for t0, t1, f0, f1 in extents
    ]


def packed_boxes(packed: np.ndarray, plot: TFPlot, min_component_area: int) -> list[BoundingBox]:
    """Boxes of the 4-connected components of a packed mask, in raster order."""
    _, extents, areas = _kernels.run_label(packed, plot.config.n_fft)
    return extents_to_boxes(extents[areas >= min_component_area], plot)


# ---------------------------------------------------------------------------
# full pipeline

STAGES = ("psd", "binarize", "morphology", "label")


@dataclass
class Detection:
    boxes: list[BoundingBox]
    profile: PsdProfile
    active: np.ndarray
    packed_mask: np.ndarray
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def mask(self) -> np.ndarray:
        """Consolidated occupancy mask, unpacked."""
        return unpack(self.packed_mask, self.profile.raw.size)


def detect_full(plot: TFPlot, config: DetectorConfig | None = None) -> Detection:
    """Run every stage, keeping intermediates and per-stage wall time (seconds)."""
    config = config or DetectorConfig()
    rows = _rows(plot)
    n_cols = rows.shape[1]
    clock = time.perf_counter
    t0 = clock()
    profile = smooth_and_floor(estimate_psd(rows), config)
    active = prune_columns(profile)
    t1 = clock()
    packed = binarize_packed(rows, active, profile)
    t2 = clock()
    packed = consolidate_packed(packed, n_cols, config)
    t3 = clock()
    boxes = packed_boxes(packed, plot, config.min_component_area)
    t4 = clock()
    timings = dict(zip(STAGES, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)))
    return Detection(boxes, profile, active, packed, timings)


def detect(plot: TFPlot, config: DetectorConfig | None = None) -> list[BoundingBox]:
    return detect_full(plot, config).boxes
