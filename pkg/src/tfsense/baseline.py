"""Kernel-search energy detector used as the comparison baseline.

The power plot is box-filtered with every ``2^i x 2^j`` kernel up to
``max_kernel``. Each kernel placement whose mean power exceeds
``conv_threshold`` times the noise floor is a hit, marked at the placement's
center cell. Connected marked cells form one seed box. Seeds grow one bin per
side while the strip they would add keeps at least ``rate_change_threshold`` of
the box's mean power. Overlapping results are merged.

The noise floor is the detector's own estimate (lowest local minimum of the
smoothed PSD) raised by ``noise_offset_db``, so a comparison between the two
isolates the localization strategy.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels, detector
from .boxes import BoundingBox
from .detector import ConfigError, DetectorConfig
from .frontend import TFPlot
from .metrics import Tally, clip_to_window

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BaselineConfig:
    # defaults picked by tune() on the sparse scenario (seeds 0 and 1) and frozen
    conv_threshold: float = 96.0
    rate_change_threshold: float = 0.45
    max_kernel: tuple[int, int] | None = None  # (rows, cols); None = plot size
    noise_offset_db: float = 0.0

    def __post_init__(self):
        if not self.conv_threshold > 0:
            raise ConfigError("conv_threshold must be > 0")
        if not self.rate_change_threshold > 0:
            raise ConfigError("rate_change_threshold must be > 0")
        if self.max_kernel is not None:
            kt, kf = self.max_kernel
            if kt < 1 or kf < 1:
                raise ConfigError("max_kernel dims must be >= 1")

    def kernel_limit(self, shape: tuple[int, int]) -> tuple[int, int]:
        t_len, f_len = shape
        if self.max_kernel is None:
            return t_len, f_len
        kt, kf = self.max_kernel
        if kt > t_len or kf > f_len:
            raise ConfigError(f"max_kernel {self.max_kernel} exceeds plot {shape}")
        return kt, kf


def powers_of_two(limit: int) -> list[int]:
    out, k = [], 1
    while k <= limit:
        out.append(k)
        k <<= 1
    return out


def kernel_sizes(shape: tuple[int, int], config: BaselineConfig | None = None) -> list[tuple[int, int]]:
    """Every ``(height, width)`` the search visits for a plot of ``shape``."""
    kt, kf = (config or BaselineConfig()).kernel_limit(shape)
    return [(h, w) for h in powers_of_two(kt) for w in powers_of_two(kf)]


def integral_image(power: np.ndarray) -> np.ndarray:
    """(T+1, F+1) cumulative sums with a zero first row and column."""
    out = np.zeros((power.shape[0] + 1, power.shape[1] + 1), dtype=np.float64)
    np.cumsum(power, axis=0, out=out[1:, 1:])
    np.cumsum(out[1:, 1:], axis=1, out=out[1:, 1:])
    return out


def noise_floor(rows: np.ndarray, config: BaselineConfig) -> float:
    profile = detector.smooth_and_floor(detector.estimate_psd(rows), DetectorConfig())
    return profile.noise_floor * 10 ** (config.noise_offset_db / 10)


def hit_mask(integral: np.ndarray, sizes: Sequence[tuple[int, int]], floor: float,
             config: BaselineConfig) -> np.ndarray:
    """Packed mask of cells that center at least one over-threshold kernel placement."""
    t_len, f_len = integral.shape[0] - 1, integral.shape[1] - 1
    out = np.zeros((t_len, (f_len + 63) >> 6), dtype=np.uint64)
    for kh, kw in sizes:
        _kernels.mark_hits(integral, kh, kw, config.conv_threshold * floor * kh * kw, out)
    return out


def seed_boxes(integral: np.ndarray, sizes: Sequence[tuple[int, int]], floor: float,
               config: BaselineConfig) -> np.ndarray:
    """Half-open ``[t0, t1, f0, f1]`` extents of the connected hit regions."""
    hits = hit_mask(integral, sizes, floor, config)
    _, extents, _ = _kernels.run_label(hits, integral.shape[1] - 1)
    return np.column_stack([extents[:, 0], extents[:, 1] + 1,
                            extents[:, 2], extents[:, 3] + 1]).astype(np.int64)


def baseline_boxes(rows: np.ndarray, config: BaselineConfig | None = None) -> np.ndarray:
    """Detected boxes as half-open bin ranges ``[t0, t1, f0, f1]``."""
    config = config or BaselineConfig()
    rows = np.ascontiguousarray(rows, dtype=np.float32)
    sizes = kernel_sizes(rows.shape, config)
    integral = integral_image(rows.astype(np.float64) ** 2)
    seeds = seed_boxes(integral, sizes, noise_floor(rows, config), config)
    if not len(seeds):
        return seeds
    _kernels.expand_boxes(integral, seeds, config.rate_change_threshold)
    return _kernels.merge_overlapping(seeds)


def baseline_detect(plot: TFPlot, config: BaselineConfig | None = None) -> list[BoundingBox]:
    cfg = plot.config
    return [BoundingBox.from_bins(int(f0), int(f1), int(t0), int(t1), cfg.n_fft, cfg.df, cfg.dt,
                                  plot.start_seq)
            for t0, t1, f0, f1 in baseline_boxes(plot.rows, config)]


# ---------------------------------------------------------------------------
# side-by-side comparison

Detector = Callable[[TFPlot], Sequence[BoundingBox]]

COMPARISON_FIELDS = ("detector", "n_plots", "mean_latency_s", "relative_time", "theta_iou",
                     "p_d", "p_fa", "mean_iou")


@dataclass(frozen=True)
class ComparisonRow:
    detector: str
    n_plots: int
    mean_latency_s: float
    relative_time: float  # mean latency over the first detector's
    theta_iou: float
    p_d: float
    p_fa: float
    mean_iou: float


def compare(cases: Sequence[tuple[TFPlot, Sequence[BoundingBox]]], detectors: Mapping[str, Detector],
            theta_iou: float = 0.5, warmup: bool = True) -> list[ComparisonRow]:
    """Run every detector on the same plots; ground truth is clipped to each plot's window.

    Rows come back in ``detectors`` order; ``relative_time`` is normalized to the
    first. With ``warmup`` each detector runs once untimed first, so one-time
    compilation is not billed to the first plot.
    """
    if not detectors:
        raise ValueError("no detectors to compare")
    timings: dict[str, float] = {}
    tallies: dict[str, Tally] = {}
    for name, fn in detectors.items():
        if warmup and cases:
            fn(cases[0][0])
        tally = Tally()
        total = 0.0
        for plot, gt in cases:
            t0 = time.perf_counter()
            det = list(fn(plot))
            total += time.perf_counter() - t0
            span = plot.config.plot_span
            tally.add(clip_to_window(gt, plot.t0, plot.t0 + span), det)
        timings[name] = total / max(len(cases), 1)
        tallies[name] = tally
        logger.info("%s: %.3f ms per plot", name, timings[name] * 1e3)
    ref = next(iter(timings.values()))
    rows = []
    for name in detectors:
        r = tallies[name].result(theta_iou)
        rows.append(ComparisonRow(name, len(cases), timings[name],
                                  timings[name] / ref if ref > 0 else float("nan"),
                                  theta_iou, r.p_d, r.p_fa, r.mean_iou))
    return rows


CONV_GRID = (16.0, 24.0, 32.0, 48.0, 64.0, 96.0, 128.0)
RATE_GRID = (0.15, 0.3, 0.45, 0.6)


def tune(cases: Sequence[tuple[TFPlot, Sequence[BoundingBox]]], conv_grid: Sequence[float] = CONV_GRID,
         rate_grid: Sequence[float] = RATE_GRID) -> tuple[BaselineConfig, float]:
    """Grid search for the thresholds with the best mean IoU on ``cases``."""
    best, best_iou = None, -1.0
    for c in conv_grid:
        for r in rate_grid:
            cfg = BaselineConfig(conv_threshold=c, rate_change_threshold=r)
            tally = Tally()
            for plot, gt in cases:
                tally.add(clip_to_window(gt, plot.t0, plot.t0 + plot.config.plot_span),
                          baseline_detect(plot, cfg))
            iou = tally.result(0.5).mean_iou
            logger.debug("conv %.1f rate %.2f: mean IoU %.3f", c, r, iou)
            if iou > best_iou:
                best, best_iou = cfg, iou
    return best, best_iou


def speedup(rows: Sequence[ComparisonRow], fast: str, slow: str) -> float:
    """How many times faster ``fast`` ran than ``slow``."""
    by = {r.detector: r for r in rows}
    return by[slow].mean_latency_s / by[fast].mean_latency_s


def write_comparison_csv(path: str | Path, rows: Sequence[ComparisonRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))
