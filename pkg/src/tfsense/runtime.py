"""Manager-worker execution of the streaming detector.

Four kinds of thread cooperate through bounded queues:

* an rx thread pulls sample blocks from the source and posts them to the manager;
* compute workers FFT row blocks straight into a ping-pong bank;
* sensing workers handle one frequency slab of a completed plot, first its
  column statistics, then binarization and consolidation on the slab plus halo;
* the manager owns the buffer, dispatches every task, merges the statistics,
  stitches slab masks, runs one global labeling pass and keeps the clock.

The heavy kernels release the GIL, so workers overlap on multi-core hosts.
Latency runs from the moment a bank completes to the moment its boxes are
emitted; a window dropped for lack of a free bank counts as a missed deadline.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import queue
import threading
import time
import traceback
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import _kernels, detector
from .boxes import BoundingBox
from .detector import ConfigError, DetectorConfig, PsdProfile
from .frontend import FrontendConfig, Gap, PingPongBuffer, Source, TFPlot, fft_rows_into

logger = logging.getLogger(__name__)

MIN_HALO = 3
DEFAULT_HALO = 7
MET_FRACTION = 0.99
MIN_VALID_RECORDS = 100
RUN_STAGES = ("fft", "psd", "binarize", "morphology", "label")


class RuntimeAbort(RuntimeError):
    """A worker failed; the run was stopped."""


class TaskKind(str, Enum):
    RX_COMPLETE = "rx-complete"
    FFT_TASK = "fft-task"
    FFT_DONE = "fft-done"
    SENSE_TASK = "sense-task"
    SENSE_DONE = "sense-done"


class SensePhase(str, Enum):
    STATS = "stats"
    MASK = "mask"


@dataclass(frozen=True)
class TaskMessage:
    kind: TaskKind
    task_id: int
    plot: int
    bank: int = -1
    seq: int = 0
    slab: int = -1
    phase: SensePhase | None = None
    payload: Any = None


@dataclass(frozen=True)
class RuntimeConfig:
    n_compute_workers: int = 1
    n_sensing_workers: int = 1
    queue_capacity: int | None = None
    deadline: float | None = None
    halo_width: int = DEFAULT_HALO
    n_banks: int = 2
    rows_per_task: int | None = None
    # hold back a non-live source instead of dropping windows; None = auto
    backpressure: bool | None = None

    def __post_init__(self):
        if self.n_compute_workers < 1 or self.n_sensing_workers < 1:
            raise ConfigError("worker counts must be >= 1")
        if self.halo_width < MIN_HALO:
            raise ConfigError(f"halo_width must be >= {MIN_HALO}, got {self.halo_width}")
        if self.n_banks < 2:
            raise ConfigError("need at least two buffer banks")
        if self.deadline is not None and not self.deadline > 0:
            raise ConfigError("deadline must be > 0")
        if self.rows_per_task is not None and self.rows_per_task < 1:
            raise ConfigError("rows_per_task must be >= 1")
        if self.queue_capacity is not None and self.queue_capacity < self.n_sensing_workers:
            raise ConfigError("queue_capacity must hold one task per sensing worker")

    def deadline_for(self, frontend: FrontendConfig) -> float:
        """Per-plot budget: ``T * dt`` unless overridden."""
        return self.deadline if self.deadline is not None else frontend.plot_span

    def task_rows(self, plot_height: int) -> int:
        """FFT rows per task; by default the largest divisor of ``T`` up to 64."""
        if self.rows_per_task is not None:
            return self.rows_per_task
        return max(d for d in range(1, min(plot_height, 64) + 1) if plot_height % d == 0)

    def capacity(self, plot_height: int) -> int:
        if self.queue_capacity is not None:
            return self.queue_capacity
        per_plot = math.ceil(plot_height / self.task_rows(plot_height))
        return 2 * self.n_banks * max(per_plot, self.n_sensing_workers)


# ---------------------------------------------------------------------------
# slabs


@dataclass(frozen=True)
class Slab:
    core: tuple[int, int]
    ext: tuple[int, int]

    @property
    def core_width(self) -> int:
        return self.core[1] - self.core[0]

    @property
    def ext_width(self) -> int:
        return self.ext[1] - self.ext[0]


def partition(n_cols: int, n_slabs: int, halo_width: int = DEFAULT_HALO) -> list[Slab]:
    """Split ``[0, n_cols)`` into contiguous cores, each padded by ``halo_width`` columns.

    Core widths differ by at most one (earlier slabs are wider); extended ranges
    are clamped to the plot.
    """
    if n_slabs < 1 or n_slabs > n_cols:
        raise ConfigError(f"cannot cut {n_cols} columns into {n_slabs} slabs")
    if halo_width < MIN_HALO:
        raise ConfigError(f"halo_width must be >= {MIN_HALO}, got {halo_width}")
    base, extra = divmod(n_cols, n_slabs)
    slabs, c0 = [], 0
    for i in range(n_slabs):
        c1 = c0 + base + (i < extra)
        slabs.append(Slab((c0, c1), (max(c0 - halo_width, 0), min(c1 + halo_width, n_cols))))
        c0 = c1
    return slabs


def stitch(parts: Sequence[np.ndarray], slabs: Sequence[Slab], n_rows: int, n_cols: int) -> np.ndarray:
    """Assemble core columns of per-slab packed masks into one full-width packed mask."""
    out = np.zeros((n_rows, (n_cols + 63) >> 6), dtype=np.uint64)
    for part, slab in zip(parts, slabs):
        _kernels.copy_columns(part, slab.core[0] - slab.ext[0], out, slab.core[0], slab.core_width)
    return out


def consolidate_slabs(mask: np.ndarray, slabs: Sequence[Slab],
                      config: DetectorConfig | None = None) -> np.ndarray:
    """Consolidate each extended slab on its own and stitch the cores (packed result)."""
    mask = np.asarray(mask, dtype=np.bool_)
    parts = [detector.consolidate_packed(detector.pack(mask[:, s.ext[0]:s.ext[1]]), s.ext_width, config)
             for s in slabs]
    return stitch(parts, slabs, mask.shape[0], mask.shape[1])


def slab_stats(rows: np.ndarray, slab: Slab) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return detector.column_stats(rows[:, slab.core[0]:slab.core[1]])


def merge_stats(parts: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]], slabs: Sequence[Slab],
                n_rows: int, n_cols: int) -> PsdProfile:
    """Per-slab column statistics -> one profile (cores are disjoint, so this is placement)."""
    sumsq = np.empty(n_cols, dtype=np.float64)
    lo = np.empty(n_cols, dtype=np.float32)
    hi = np.empty(n_cols, dtype=np.float32)
    for (s, a, b), slab in zip(parts, slabs):
        c0, c1 = slab.core
        sumsq[c0:c1], lo[c0:c1], hi[c0:c1] = s, a, b
    return PsdProfile(raw=sumsq / n_rows, col_min=lo, col_max=hi)


def slab_mask(rows: np.ndarray, slab: Slab, profile: PsdProfile, active: np.ndarray,
              config: DetectorConfig) -> tuple[np.ndarray, float, float]:
    """Binarize and consolidate one extended slab; returns ``(packed, t_bin, t_morph)``."""
    e0, e1 = slab.ext
    t0 = time.perf_counter()
    packed = detector.binarize_packed(rows, active, profile, e0, e1)
    t1 = time.perf_counter()
    packed = detector.consolidate_packed(packed, e1 - e0, config)
    return packed, t1 - t0, time.perf_counter() - t1


def detect_slabs(plot: TFPlot, config: DetectorConfig, slabs: Sequence[Slab]) -> list[BoundingBox]:
    """Slab-parallel detection run serially in the calling thread (reference path)."""
    rows = np.ascontiguousarray(plot.rows, dtype=np.float32)
    t_len, n_cols = rows.shape
    profile = merge_stats([slab_stats(rows, s) for s in slabs], slabs, t_len, n_cols)
    profile = detector.smooth_and_floor(profile, config)
    active = detector.prune_columns(profile)
    parts = [slab_mask(rows, s, profile, active, config)[0] for s in slabs]
    packed = stitch(parts, slabs, t_len, n_cols)
    return detector.packed_boxes(packed, plot, config.min_component_area)


# ---------------------------------------------------------------------------
# latency accounting


@dataclass(frozen=True)
class LatencyRecord:
    plot: int
    start: float
    end: float
    deadline: float
    dropped: bool = False

    @property
    def elapsed(self) -> float:
        return math.inf if self.dropped else self.end - self.start

    @property
    def met(self) -> bool:
        return self.elapsed <= self.deadline


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    """Smallest value with at least ``pct`` percent of the samples at or below it."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("no samples")
    rank = max(math.ceil(pct / 100 * n - 1e-9), 1)
    return float(sorted_values[rank - 1])


@dataclass
class RunReport:
    records: list[LatencyRecord]
    deadline: float
    overruns: int = 0
    stage_times: dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def n_plots(self) -> int:
        return len(self.records)

    @property
    def latencies(self) -> np.ndarray:
        return np.sort(np.array([r.elapsed for r in self.records], dtype=np.float64))

    @property
    def percentiles(self) -> dict[str, float]:
        lat = self.latencies
        return {"p50": nearest_rank(lat, 50), "p90": nearest_rank(lat, 90),
                "p99": nearest_rank(lat, 99), "max": float(lat[-1])}

    @property
    def fraction_met(self) -> float:
        return sum(r.met for r in self.records) / len(self.records)

    @property
    def verdict(self) -> bool:
        return self.fraction_met >= MET_FRACTION - 1e-12

    @property
    def valid(self) -> bool:
        """Enough samples for a meaningful 99th percentile."""
        return self.n_plots >= MIN_VALID_RECORDS

    def ccdf(self) -> np.ndarray:
        """``(latency_ms, P[L > latency])`` at every distinct finite latency."""
        lat = self.latencies
        finite = np.unique(lat[np.isfinite(lat)])
        above = lat.size - np.searchsorted(lat, finite, side="right")
        return np.column_stack([finite * 1e3, above / lat.size])

    def summary(self) -> str:
        pct = self.percentiles
        lines = [
            f"plots: {self.n_plots}" + ("" if self.valid else f" (fewer than {MIN_VALID_RECORDS}; p99 is indicative)"),
            f"deadline_ms: {self.deadline * 1e3:.3f}",
            *(f"{k}_ms: {v * 1e3:.3f}" for k, v in pct.items()),
            f"fraction_met: {self.fraction_met:.4f}",
            f"overruns: {self.overruns}",
            f"verdict: {'pass' if self.verdict else 'fail'}",
        ]
        if self.stage_times:
            lines.append("stage_ms: " + " ".join(f"{k}={v * 1e3:.3f}" for k, v in self.stage_times.items()))
        if self.wall_time:
            lines.append(f"wall_s: {self.wall_time:.3f}")
        return "\n".join(lines)

    def write(self, out_dir: str | Path, prefix: str = "latency") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"records": out / f"{prefix}.csv", "ccdf": out / f"{prefix}_ccdf.csv",
                 "summary": out / f"{prefix}_summary.txt"}
        with open(paths["records"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["plot_index", "start_s", "end_s", "elapsed_ms", "deadline_ms", "met", "dropped"])
            for r in self.records:
                w.writerow([r.plot, f"{r.start:.9f}", f"{r.end:.9f}", f"{r.elapsed * 1e3:.6f}",
                            f"{r.deadline * 1e3:.6f}", int(r.met), int(r.dropped)])
        with open(paths["ccdf"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["latency_ms", "ccdf"])
            for x, p in self.ccdf():
                w.writerow([f"{x:.6f}", f"{p:.6f}"])
        paths["summary"].write_text(self.summary() + "\n", encoding="utf-8")
        return paths


def report(records: Sequence[LatencyRecord], deadline: float | None = None, overruns: int = 0,
           stage_times: dict[str, float] | None = None, wall_time: float = 0.0) -> RunReport:
    if not records:
        raise ValueError("report needs at least one latency record")
    deadline = records[0].deadline if deadline is None else deadline
    ordered = sorted(records, key=lambda r: r.plot)
    return RunReport(ordered, deadline, overruns, dict(stage_times or {}), wall_time)


# ---------------------------------------------------------------------------
# the engine


@dataclass(frozen=True)
class PlotResult:
    index: int
    t0: float
    boxes: list[BoundingBox]
    latency: float


@dataclass
class RunResult:
    report: RunReport | None
    plots: list[PlotResult]
    ingest_lost: int = 0

    def boxes(self) -> list[tuple[int, BoundingBox]]:
        return [(p.index, b) for p in self.plots for b in p.boxes]


@dataclass
class _Job:
    plot: TFPlot
    start: float
    stats: list = field(default_factory=list)
    parts: list = field(default_factory=list)
    waiting: int = 0
    profile: PsdProfile | None = None
    times: dict[str, float] = field(default_factory=dict)


_EOS = "eos"
_ERROR = "error"


class _Engine:
    def __init__(self, source: Source, fe: FrontendConfig, det: DetectorConfig,
                 rt: RuntimeConfig, sink: Callable[[PlotResult], None] | None):
        self.source, self.fe, self.det, self.rt, self.sink = source, fe, det, rt, sink
        self.slabs = partition(fe.n_fft, rt.n_sensing_workers, rt.halo_width)
        self.deadline = rt.deadline_for(fe)
        self.rows_per_task = rt.task_rows(fe.plot_height)
        cap = rt.capacity(fe.plot_height)
        self.inbox: queue.Queue = queue.Queue(maxsize=cap)
        self.fft_q: queue.Queue = queue.Queue(maxsize=cap)
        self.sense_q: queue.Queue = queue.Queue(maxsize=cap)
        self.buffer = PingPongBuffer(fe, rt.n_banks)
        self.ids = itertools.count()
        self.stop = threading.Event()
        self.outstanding = [0] * rt.n_banks
        self.doomed: set[int] = set()
        self.fft_time: dict[int, float] = {}
        self.ready: deque[TFPlot] = deque()
        self.job: _Job | None = None
        self.records: list[LatencyRecord] = []
        self.results: list[PlotResult] = []
        self.stage_sum = dict.fromkeys(RUN_STAGES, 0.0)
        self.rx_done = False
        self.backpressure = rt.backpressure if rt.backpressure is not None else not source.live
        self.retired = 0
        self.finished: set[int] = set()
        self.retire_cond = threading.Condition()

    # -- threads -----------------------------------------------------------

    def _post(self, item) -> None:
        while not self.stop.is_set():
            try:
                self.inbox.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def _rx(self) -> None:
        height, per_task = self.fe.plot_height, self.rows_per_task
        # small blocks (one datagram each) are batched up to a full FFT task so
        # the task count per plot, and so the queue sizing, is source-independent
        pend: list[np.ndarray] = []
        pend_seq = pend_n = 0

        def flush():
            nonlocal pend, pend_n
            if pend:
                block = pend[0] if len(pend) == 1 else np.concatenate(pend)
                self._post(TaskMessage(TaskKind.RX_COMPLETE, next(self.ids), pend_seq // height,
                                       seq=pend_seq, payload=block))
                pend, pend_n = [], 0

        try:
            for item in self.source.blocks(self.fe.n_fft, per_task):
                if self.stop.is_set():
                    break
                if isinstance(item, Gap):
                    flush()
                    self._post(TaskMessage(TaskKind.RX_COMPLETE, next(self.ids), item.seq // height,
                                           seq=item.seq, payload=item))
                    continue
                seq, block = item
                if self.backpressure:
                    self._hold((seq + len(block) - 1) // height)
                i = 0
                while i < len(block):
                    at = seq + i
                    if pend and at != pend_seq + pend_n:
                        flush()
                    # never hand a compute worker rows from two windows
                    n = min(len(block) - i, height - at % height, per_task - pend_n)
                    if not pend:
                        pend_seq = at
                    pend.append(block[i:i + n])
                    pend_n += n
                    i += n
                    if pend_n == per_task or (pend_seq + pend_n) % height == 0:
                        flush()
            flush()
        except BaseException as exc:  # noqa: BLE001 - reported to the manager
            self._post((_ERROR, "rx", exc, traceback.format_exc()))
        finally:
            self._post(_EOS)

    def _hold(self, window: int) -> None:
        """Block until a bank can take ``window``."""
        with self.retire_cond:
            while window >= self.retired + self.rt.n_banks and not self.stop.is_set():
                self.retire_cond.wait(0.1)

    def _retire(self, window: int) -> None:
        # windows can finish out of order (FFT tasks race), so only a
        # contiguous prefix of finished windows frees the rx thread
        with self.retire_cond:
            if window < self.retired:
                return
            self.finished.add(window)
            advanced = False
            while self.retired in self.finished:
                self.finished.discard(self.retired)
                self.retired += 1
                advanced = True
            if advanced:
                self.retire_cond.notify_all()

    def _compute(self, ready: threading.Barrier) -> None:
        # plan the common FFT shape before the clock starts
        warm = np.zeros((self.rows_per_task, self.fe.n_fft), dtype=np.float32)
        if not self._warm(ready, "compute worker", fft_rows_into,
                          np.zeros(warm.shape, dtype=np.complex64), warm):
            return
        while True:
            msg = self.fft_q.get()
            if msg is None:
                return
            try:
                block, view = msg.payload
                t0 = time.perf_counter()
                fft_rows_into(block, view)
                elapsed = time.perf_counter() - t0
                self._post(TaskMessage(TaskKind.FFT_DONE, msg.task_id, msg.plot, msg.bank, msg.seq,
                                       payload=(len(block), elapsed)))
            except BaseException as exc:  # noqa: BLE001
                self._post((_ERROR, "compute worker", exc, traceback.format_exc()))
                return

    def _sense_one(self, msg: TaskMessage):
        slab = self.slabs[msg.slab]
        if msg.phase is SensePhase.STATS:
            return slab_stats(msg.payload, slab)
        rows, profile, active = msg.payload
        return slab_mask(rows, slab, profile, active, self.det)

    def _sense(self, ready: threading.Barrier) -> None:
        if not self._warm(ready, "sensing worker", self._warm_sensing):
            return
        while True:
            msg = self.sense_q.get()
            if msg is None:
                return
            try:
                out = self._sense_one(msg)
                self._post(TaskMessage(TaskKind.SENSE_DONE, msg.task_id, msg.plot, msg.bank,
                                       slab=msg.slab, phase=msg.phase, payload=out))
            except BaseException as exc:  # noqa: BLE001
                self._post((_ERROR, "sensing worker", exc, traceback.format_exc()))
                return

    def _warm(self, ready: threading.Barrier, where: str, fn, *args) -> bool:
        try:
            fn(*args)
        except BaseException as exc:  # noqa: BLE001
            ready.wait()
            self._post((_ERROR, where, exc, traceback.format_exc()))
            return False
        ready.wait()
        return True

    def _warm_sensing(self) -> None:
        rng = np.random.default_rng(0)
        rows = rng.random((16, self.fe.n_fft), dtype=np.float32)
        try:
            detect_slabs(TFPlot(rows, 0, self.fe), self.det, self.slabs)
        except ConfigError:
            pass

    # -- manager -------------------------------------------------------------

    def _on_rx(self, msg: TaskMessage) -> None:
        if isinstance(msg.payload, Gap):
            gap = msg.payload
            logger.warning("%d chunk(s) lost at seq %d", gap.count, gap.seq)
            self._doom_range(gap.seq, gap.count)
            return
        window = msg.plot
        if window in self.doomed:
            return
        view = self.buffer.acquire(msg.seq, len(msg.payload))
        if view is None:
            self._retire(window)  # no free bank: the buffer counted the overrun
            return
        bank = self.buffer.owner(window)
        task = TaskMessage(TaskKind.FFT_TASK, msg.task_id, window, bank, msg.seq,
                           payload=(msg.payload, view))
        try:
            self.fft_q.put_nowait(task)
        except queue.Full:
            logger.warning("compute queue full: dropping window %d", window)
            self._doom(window)
            return
        self.outstanding[bank] += 1

    def _doom(self, window: int) -> None:
        """Drop ``window`` once no FFT task still writes into its bank."""
        self.doomed.add(window)
        bank = self.buffer.owner(window)
        if bank is None or self.outstanding[bank] == 0:
            self.buffer.skip(window * self.fe.plot_height, self.fe.plot_height)
            self._retire(window)

    def _doom_range(self, seq: int, count: int) -> None:
        height = self.fe.plot_height
        for window in range(seq // height, (seq + count - 1) // height + 1):
            if window not in self.doomed:
                self._doom(window)

    def _on_fft_done(self, msg: TaskMessage) -> None:
        n_rows, elapsed = msg.payload
        self.outstanding[msg.bank] -= 1
        self.fft_time[msg.plot] = self.fft_time.get(msg.plot, 0.0) + elapsed
        if msg.plot in self.doomed:
            if self.outstanding[msg.bank] == 0 and self.buffer.owner(msg.plot) == msg.bank:
                self.buffer.skip(msg.plot * self.fe.plot_height, self.fe.plot_height)
                self._retire(msg.plot)
            return
        plot = self.buffer.commit(msg.seq, n_rows)
        if plot is not None:
            self.ready.append(plot)
            self._start_next()

    def _dispatch(self, phase: SensePhase, payload) -> None:
        job = self.job
        job.waiting = len(self.slabs)
        for i in range(len(self.slabs)):
            self.sense_q.put_nowait(TaskMessage(TaskKind.SENSE_TASK, next(self.ids), job.plot.index,
                                                job.plot.bank, slab=i, phase=phase, payload=payload))

    def _start_next(self) -> None:
        if self.job is not None or not self.ready:
            return
        plot = self.ready.popleft()
        self.job = _Job(plot, self.buffer.complete_time[plot.bank])
        self.job.stats = [None] * len(self.slabs)
        self.job.parts = [None] * len(self.slabs)
        self._dispatch(SensePhase.STATS, plot.rows)

    def _on_sense_done(self, msg: TaskMessage) -> None:
        job = self.job
        job.waiting -= 1
        if msg.phase is SensePhase.STATS:
            job.stats[msg.slab] = msg.payload
            if job.waiting:
                return
            t_len, n_cols = job.plot.shape
            profile = detector.smooth_and_floor(merge_stats(job.stats, self.slabs, t_len, n_cols), self.det)
            active = detector.prune_columns(profile)
            job.times["psd"] = time.monotonic() - job.start
            self._dispatch(SensePhase.MASK, (job.plot.rows, profile, active))
            return
        packed, t_bin, t_morph = msg.payload
        job.parts[msg.slab] = packed
        job.times["binarize"] = max(job.times.get("binarize", 0.0), t_bin)
        job.times["morphology"] = max(job.times.get("morphology", 0.0), t_morph)
        if job.waiting:
            return
        t0 = time.perf_counter()
        t_len, n_cols = job.plot.shape
        mask = stitch(job.parts, self.slabs, t_len, n_cols)
        boxes = detector.packed_boxes(mask, job.plot, self.det.min_component_area)
        end = time.monotonic()
        job.times["label"] = time.perf_counter() - t0
        self._finish(job, boxes, end)

    def _finish(self, job: _Job, boxes: list[BoundingBox], end: float) -> None:
        plot = job.plot
        rec = LatencyRecord(plot.index, job.start, end, self.deadline)
        self.records.append(rec)
        job.times["fft"] = self.fft_time.pop(plot.index, 0.0)
        for k in RUN_STAGES:
            self.stage_sum[k] += job.times.get(k, 0.0)
        result = PlotResult(plot.index, plot.t0, boxes, rec.elapsed)
        self.results.append(result)
        self.buffer.release(plot.bank)
        self._retire(plot.index)
        self.job = None
        if self.sink is not None:
            self.sink(result)
        self._start_next()

    def _idle(self) -> bool:
        return (self.rx_done and self.job is None and not self.ready
                and not any(self.outstanding))

    def run(self) -> RunResult:
        n_workers = self.rt.n_compute_workers + self.rt.n_sensing_workers
        ready = threading.Barrier(n_workers + 1)
        workers = [threading.Thread(target=self._compute, args=(ready,), name=f"compute-{i}", daemon=True)
                   for i in range(self.rt.n_compute_workers)]
        workers += [threading.Thread(target=self._sense, args=(ready,), name=f"sense-{i}", daemon=True)
                    for i in range(self.rt.n_sensing_workers)]
        for w in workers:
            w.start()
        ready.wait()
        rx = threading.Thread(target=self._rx, name="rx", daemon=True)
        started = time.monotonic()
        rx.start()
        failure = None
        try:
            while not self._idle():
                item = self.inbox.get()
                if item == _EOS:
                    self.rx_done = True
                elif isinstance(item, tuple) and item[0] == _ERROR:
                    failure = item
                    break
                elif item.kind is TaskKind.RX_COMPLETE:
                    self._on_rx(item)
                elif item.kind is TaskKind.FFT_DONE:
                    self._on_fft_done(item)
                else:
                    self._on_sense_done(item)
        finally:
            self.stop.set()
            for _ in range(self.rt.n_compute_workers):
                self.fft_q.put(None)
            for _ in range(self.rt.n_sensing_workers):
                self.sense_q.put(None)
            for w in workers:
                w.join(timeout=5.0)
            rx.join(timeout=1.0)
        if failure is not None:
            _, where, exc, tb = failure
            raise RuntimeAbort(f"{where} failed: {exc!r}\n{tb}") from exc
        wall = time.monotonic() - started
        partial = self.buffer.filling_windows()
        if partial:
            logger.info("stream ended inside window(s) %s; partial plots discarded", partial)
        dropped = sorted(set(self.buffer.dropped_windows))
        records = self.records + [LatencyRecord(w, 0.0, 0.0, self.deadline, dropped=True) for w in dropped]
        n_done = max(len(self.records), 1)
        stages = {k: v / n_done for k, v in self.stage_sum.items()}
        rep = report(records, self.deadline, self.buffer.overruns, stages, wall) if records else None
        return RunResult(rep, self.results, getattr(self.source.stats, "lost", 0))


def run(source: Source, frontend_config: FrontendConfig, detector_config: DetectorConfig | None = None,
        runtime_config: RuntimeConfig | None = None,
        sink: Callable[[PlotResult], None] | None = None) -> RunResult:
    """Stream ``source`` through the worker pool until it ends.

    ``sink`` is called from the manager thread with each plot's result as soon
    as its boxes exist. The report is None when no plot completed.
    """
    det = detector_config or DetectorConfig()
    rt = runtime_config or RuntimeConfig()
    if frontend_config.n_fft < det.savgol_window:
        raise ConfigError(f"{frontend_config.n_fft} columns is fewer than savgol_window={det.savgol_window}")
    if rt.n_sensing_workers > 1 and rt.halo_width < det.dependency_radius:
        raise ConfigError(f"halo_width {rt.halo_width} is below the consolidation radius "
                          f"{det.dependency_radius}; slab masks would differ from the whole-plot mask")
    return _Engine(source, frontend_config, det, rt, sink).run()
