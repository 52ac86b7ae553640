"""I/Q ingestion, FFT rows and TF-plot assembly.

Rows are non-overlapping, rectangular-window FFTs of ``n_fft`` samples,
FFT-shifted so column 0 is ``-fs/2``. ``plot_height`` consecutive rows form one
TF plot; the ping-pong buffer hands completed plots to the detector while the
next one fills.

Datagram framing (one or more chunks per datagram)::

    uint64 little-endian seq of the first chunk | I0 Q0 I1 Q1 ... (cf32 or ci16)

A datagram carrying only the 8-byte header marks end of stream.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import scipy.fft as sfft

from . import _kernels

try:
    import pyfftw
except ImportError:  # pragma: no cover - optional accelerator
    pyfftw = None

logger = logging.getLogger(__name__)

SEQ_HEADER = struct.Struct("<Q")
SAMPLE_FORMATS = {"cf32": np.dtype("<f4"), "ci16": np.dtype("<i2")}


class FramingError(ValueError):
    """A chunk or datagram does not have the expected shape."""


class OverrunError(RuntimeError):
    """Input was lost: a sequence gap on the wire or no free buffer bank."""

    def __init__(self, lost: int, message: str = ""):
        super().__init__(message or f"{lost} chunk(s) lost")
        self.lost = lost


@dataclass(frozen=True)
class FrontendConfig:
    fs: float
    n_fft: int = 1024
    plot_height: int = 2000

    def __post_init__(self):
        if not self.fs > 0:
            raise ValueError("fs must be > 0")
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.plot_height < 1:
            raise ValueError("plot_height must be >= 1")

    @property
    def dt(self) -> float:
        return self.n_fft / self.fs

    @property
    def df(self) -> float:
        return self.fs / self.n_fft

    @property
    def plot_span(self) -> float:
        """Wall-clock time covered by one TF plot (its processing deadline)."""
        return self.plot_height * self.dt


def resolution(config: FrontendConfig) -> tuple[float, float]:
    """``(dt, df)`` for the config."""
    return config.dt, config.df


def input_rate_bps(fs: float, component_bits: int = 16) -> float:
    """Raw I/Q rate for ``component_bits`` per rail."""
    return fs * 2 * component_bits


def fft_throughput_bps(config: FrontendConfig, component_bits: int = 32) -> float:
    """Per-stage FFT throughput requirement, ``F * size_b / dt``."""
    return config.n_fft * 2 * component_bits / config.dt


@dataclass(frozen=True)
class IQChunk:
    seq: int
    samples: np.ndarray


@dataclass
class TFPlot:
    rows: np.ndarray
    start_seq: int
    config: FrontendConfig
    bank: int = -1

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.shape

    @property
    def t0(self) -> float:
        return self.start_seq * self.config.dt

    @property
    def index(self) -> int:
        return self.start_seq // self.config.plot_height


# ---------------------------------------------------------------------------
# FFT rows

_local = threading.local()


def _fftw_plan(shape: tuple[int, int]):
    plans = getattr(_local, "plans", None)
    if plans is None:
        plans = _local.plans = {}
    plan = plans.get(shape)
    if plan is None:
        src = pyfftw.empty_aligned(shape, dtype="complex64")
        dst = pyfftw.empty_aligned(shape, dtype="complex64")
        plan = plans[shape] = pyfftw.FFTW(src, dst, axes=(1,), threads=1,
                                          flags=("FFTW_MEASURE",))
    return plan


def _spectrum(block: np.ndarray) -> np.ndarray:
    if pyfftw is not None:
        plan = _fftw_plan(block.shape)
        plan.input_array[...] = block
        return plan()
    return sfft.fft(block, axis=1)


def fft_rows_into(block: np.ndarray, out: np.ndarray) -> None:
    """Write ``|fftshift(fft(block[r]))|`` into ``out[r]`` (float32 rows)."""
    _kernels.magnitude_shift(_spectrum(np.asarray(block, dtype=np.complex64)), out)


def fft_rows(block: np.ndarray) -> np.ndarray:
    block = np.atleast_2d(np.asarray(block, dtype=np.complex64))
    out = np.empty(block.shape, dtype=np.float32)
    fft_rows_into(block, out)
    return out


def fft_row(chunk: IQChunk | np.ndarray, n_fft: int | None = None) -> np.ndarray:
    samples = chunk.samples if isinstance(chunk, IQChunk) else chunk
    samples = np.asarray(samples)
    if samples.ndim != 1 or (n_fft is not None and samples.size != n_fft):
        raise FramingError(f"chunk has {samples.size} samples, expected {n_fft}")
    if samples.size < 2 or samples.size & (samples.size - 1):
        raise FramingError(f"chunk length {samples.size} is not a power of two")
    return fft_rows(samples[None, :])[0]


# ---------------------------------------------------------------------------
# ping-pong buffer


class BankState(Enum):
    FREE = "free"
    FILLING = "filling"
    READY = "ready"


class PingPongBuffer:
    """Two (or more) banks of ``height`` rows decoupling row writers from a plot reader.

    Rows are addressed by absolute sequence number; window ``w`` holds rows
    ``[w*T, (w+1)*T)``. The first write into a window claims a free bank,
    preferring the one after the last claimed so banks alternate. If no bank is
    free the whole window is dropped and counted as one overrun; writers never
    block. A completed bank stays READY until the reader calls :meth:`release`.
    """

    def __init__(self, config: FrontendConfig, n_banks: int = 2):
        self.config = config
        self.height = config.plot_height
        self.banks = np.zeros((n_banks, config.plot_height, config.n_fft), dtype=np.float32)
        self.state = [BankState.FREE] * n_banks
        self.window = [-1] * n_banks
        self.fill = [0] * n_banks
        self.complete_time = [0.0] * n_banks
        self.overruns = 0
        self.dropped_windows: list[int] = []
        self._owner: dict[int, int] = {}
        self._dropped: set[int] = set()
        self._last_bank = n_banks - 1
        self._lock = threading.Lock()

    def _claim(self, window: int) -> int | None:
        bank = self._owner.get(window)
        if bank is not None:
            return bank
        if window in self._dropped:
            return None
        n = len(self.state)
        for step in range(1, n + 1):
            cand = (self._last_bank + step) % n
            if self.state[cand] is BankState.FREE:
                self.state[cand] = BankState.FILLING
                self.window[cand] = window
                self.fill[cand] = 0
                self._owner[window] = cand
                self._last_bank = cand
                return cand
        self._drop(window)
        return None

    def _drop(self, window: int) -> None:
        self._dropped.add(window)
        self.dropped_windows.append(window)
        self.overruns += 1
        logger.debug("overrun: window %d dropped, no free bank", window)
        # forget windows far behind the stream head
        if len(self._dropped) > 64:
            horizon = window - 32
            self._dropped = {w for w in self._dropped if w >= horizon}

    def acquire(self, seq: int, n_rows: int) -> np.ndarray | None:
        """Writable view for rows ``[seq, seq + n_rows)``, or None if the window is dropped.

        The range must not cross a window boundary. Pair with :meth:`commit`.
        """
        window, offset = divmod(seq, self.height)
        if offset + n_rows > self.height:
            raise FramingError(f"rows {seq}..{seq + n_rows} cross a plot boundary")
        with self._lock:
            bank = self._claim(window)
        if bank is None:
            return None
        return self.banks[bank, offset:offset + n_rows]

    def commit(self, seq: int, n_rows: int) -> TFPlot | None:
        """Mark rows written; returns the plot when this completes its window."""
        window = seq // self.height
        with self._lock:
            bank = self._owner.get(window)
            if bank is None:
                return None
            self.fill[bank] += n_rows
            if self.fill[bank] < self.height:
                return None
            self.state[bank] = BankState.READY
            self.complete_time[bank] = time.monotonic()
            del self._owner[window]
        return TFPlot(self.banks[bank], window * self.height, self.config, bank)

    def write(self, seq: int, rows: np.ndarray) -> TFPlot | None:
        view = self.acquire(seq, len(rows))
        if view is None:
            return None
        view[...] = rows
        return self.commit(seq, len(rows))

    def skip(self, seq: int, count: int) -> None:
        """Account for ``count`` rows lost upstream starting at ``seq``."""
        if count <= 0:
            return
        first = seq // self.height
        last = (seq + count - 1) // self.height
        with self._lock:
            for window in range(first, last + 1):
                bank = self._owner.pop(window, None)
                if bank is not None:
                    self.state[bank] = BankState.FREE
                    self.window[bank] = -1
                if window not in self._dropped:
                    self._drop(window)

    def owner(self, window: int) -> int | None:
        """Bank currently filling ``window``, if any."""
        return self._owner.get(window)

    def filling_windows(self) -> list[int]:
        return sorted(self._owner)

    def release(self, bank: int) -> None:
        with self._lock:
            self.state[bank] = BankState.FREE
            self.window[bank] = -1


def assemble(rows: Iterable[tuple[int, np.ndarray]], buffer: PingPongBuffer) -> Iterator[TFPlot]:
    """Feed ``(seq, row)`` pairs through ``buffer``, yielding each completed plot.

    Yielded plots own a copy of their rows; the bank is released as soon as the
    consumer asks for the next plot.
    """
    for seq, row in rows:
        plot = buffer.write(seq, np.asarray(row)[None, :])
        if plot is None:
            continue
        copy = TFPlot(plot.rows.copy(), plot.start_seq, plot.config, plot.bank)
        try:
            yield copy
        finally:
            buffer.release(plot.bank)


# ---------------------------------------------------------------------------
# ingestion


@dataclass
class IngestStats:
    chunks: int = 0
    lost: int = 0
    started: float = field(default_factory=time.monotonic)
    finished: float | None = None
    component_bits: int = 32

    @property
    def elapsed(self) -> float:
        end = self.finished if self.finished is not None else time.monotonic()
        return end - self.started

    def sample_rate(self, n_fft: int) -> float:
        """Achieved ingest rate in samples per second."""
        return self.chunks * n_fft / self.elapsed if self.elapsed > 0 else float("inf")

    def bit_rate(self, n_fft: int) -> float:
        return self.sample_rate(n_fft) * 2 * self.component_bits


@dataclass(frozen=True)
class Gap:
    """``count`` chunks starting at ``seq`` never arrived."""
    seq: int
    count: int


def decode_samples(raw: bytes | np.ndarray, sample_format: str) -> np.ndarray:
    dtype = SAMPLE_FORMATS[sample_format]
    vals = np.frombuffer(raw, dtype=dtype) if isinstance(raw, (bytes, bytearray, memoryview)) \
        else np.asarray(raw).view(dtype)
    if vals.size % 2:
        raise FramingError("odd number of I/Q components")
    if sample_format == "ci16":
        out = vals.astype(np.float32) * np.float32(1 / 32768)
        return out.view(np.complex64)
    return vals.astype(np.float32, copy=False).view(np.complex64)


def encode_samples(samples: np.ndarray, sample_format: str) -> bytes:
    comp = np.asarray(samples, dtype=np.complex64).view(np.float32)
    if sample_format == "ci16":
        comp = np.clip(np.round(comp * 32768), -32768, 32767).astype("<i2")
    else:
        comp = comp.astype("<f4")
    return comp.tobytes()


class Source:
    """Base class for I/Q sources yielding blocks of whole chunks."""

    sample_format = "cf32"

    def __init__(self):
        self.stats = IngestStats()

    @property
    def live(self) -> bool:
        """True when samples arrive on their own clock and cannot be held back."""
        return True

    def blocks(self, n_fft: int, max_chunks: int) -> Iterator[tuple[int, np.ndarray] | Gap]:
        raise NotImplementedError


class ArraySource(Source):
    """Replay an in-memory sample vector, optionally looped and paced to ``fs``."""

    def __init__(self, samples: np.ndarray, fs: float | None = None, paced: bool = False,
                 repeat: int = 1):
        super().__init__()
        self.samples = np.asarray(samples, dtype=np.complex64)
        self.fs = fs
        self.paced = paced
        self.repeat = repeat
        if paced and not fs:
            raise ValueError("paced replay needs fs")

    @property
    def live(self) -> bool:
        return self.paced

    def _chunk_blocks(self, n_fft: int, max_chunks: int):
        per_pass = self.samples.size // n_fft
        frames = self.samples[: per_pass * n_fft].reshape(per_pass, n_fft)
        seq = 0
        for _ in range(self.repeat):
            for i in range(0, per_pass, max_chunks):
                block = frames[i:i + max_chunks]
                yield seq, block
                seq += len(block)

    def blocks(self, n_fft, max_chunks):
        self.stats = IngestStats(component_bits=32)
        chunk_period = n_fft / self.fs if self.fs else 0.0
        start = time.monotonic()
        for seq, block in self._chunk_blocks(n_fft, max_chunks):
            if self.paced:
                # a block exists once its last sample has "arrived"
                due = start + (seq + len(block)) * chunk_period
                delay = due - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            self.stats.chunks += len(block)
            yield seq, block
        self.stats.finished = time.monotonic()


class FileSource(ArraySource):
    """Replay an interleaved I/Q file (``cf32`` = .32cf, or ``ci16``)."""

    def __init__(self, path: str | Path, sample_format: str = "cf32", fs: float | None = None,
                 paced: bool = False, repeat: int = 1):
        if sample_format not in SAMPLE_FORMATS:
            raise ValueError(f"unknown sample format {sample_format!r}")
        raw = np.memmap(path, dtype=np.uint8, mode="r")
        item = 2 * SAMPLE_FORMATS[sample_format].itemsize
        if raw.size % item:
            raise FramingError(f"{path}: {raw.size} bytes is not a whole number of samples")
        super().__init__(decode_samples(raw, sample_format), fs=fs, paced=paced, repeat=repeat)
        self.sample_format = sample_format
        self.path = Path(path)

    def blocks(self, n_fft, max_chunks):
        for item in super().blocks(n_fft, max_chunks):
            yield item
        self.stats.component_bits = 16 if self.sample_format == "ci16" else 32


class DatagramSource(Source):
    """Receive chunk datagrams on a UDP socket.

    A sequence jump is reported as a :class:`Gap` (or raised as
    :class:`OverrunError` when ``strict``). Duplicate or reordered datagrams
    are discarded and counted. Reception ends at the end-of-stream marker or
    after ``idle_timeout`` seconds of silence.
    """

    def __init__(self, host: str, port: int, n_fft: int, chunks_per_datagram: int = 1,
                 sample_format: str = "cf32", strict: bool = False, idle_timeout: float = 2.0,
                 sock: socket.socket | None = None):
        super().__init__()
        if sample_format not in SAMPLE_FORMATS:
            raise ValueError(f"unknown sample format {sample_format!r}")
        self.n_fft = n_fft
        self.chunks_per_datagram = chunks_per_datagram
        self.sample_format = sample_format
        self.strict = strict
        self.idle_timeout = idle_timeout
        self.discarded = 0
        self.sock = sock or socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        if sock is None:
            self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 24)
            self.sock.bind((host, port))
        self.address = self.sock.getsockname()

    @property
    def payload_bytes(self) -> int:
        return self.chunks_per_datagram * self.n_fft * 2 * SAMPLE_FORMATS[self.sample_format].itemsize

    def parse(self, datagram: bytes) -> tuple[int, np.ndarray | None]:
        if len(datagram) < SEQ_HEADER.size:
            raise FramingError(f"datagram of {len(datagram)} bytes has no sequence header")
        (seq,) = SEQ_HEADER.unpack_from(datagram)
        payload = memoryview(datagram)[SEQ_HEADER.size:]
        if len(payload) == 0:
            return seq, None
        if len(payload) != self.payload_bytes:
            raise FramingError(f"payload of {len(payload)} bytes, expected {self.payload_bytes}")
        samples = decode_samples(payload, self.sample_format)
        return seq, samples.reshape(self.chunks_per_datagram, self.n_fft)

    def blocks(self, n_fft, max_chunks):
        if n_fft != self.n_fft:
            raise FramingError(f"source framed for n_fft={self.n_fft}, asked for {n_fft}")
        self.stats = IngestStats(component_bits=16 if self.sample_format == "ci16" else 32)
        self.sock.settimeout(self.idle_timeout)
        expected = 0
        buf = bytearray(SEQ_HEADER.size + self.payload_bytes + 1)
        try:
            while True:
                try:
                    size = self.sock.recv_into(buf)
                except socket.timeout:
                    logger.info("datagram source idle for %.1f s, stopping", self.idle_timeout)
                    break
                seq, block = self.parse(bytes(buf[:size]))
                if block is None:
                    break
                if seq < expected:
                    self.discarded += 1
                    continue
                if seq > expected:
                    lost = seq - expected
                    self.stats.lost += lost
                    if self.strict:
                        raise OverrunError(lost, f"sequence jump {expected} -> {seq}: {lost} chunk(s) lost")
                    yield Gap(expected, lost)
                self.stats.chunks += len(block)
                expected = seq + len(block)
                yield seq, block
        finally:
            self.stats.finished = time.monotonic()

    def close(self) -> None:
        self.sock.close()


def send_datagrams(samples: np.ndarray, address: tuple[str, int], n_fft: int,
                   chunks_per_datagram: int = 1, sample_format: str = "cf32",
                   fs: float | None = None, paced: bool = False, first_seq: int = 0,
                   skip: Iterable[int] = (), end_marker: bool = True) -> int:
    """Stream ``samples`` as chunk datagrams; returns the number of datagrams sent.

    Datagram sequence numbers listed in ``skip`` are not sent (for loss tests).
    """
    skip = set(skip)
    per = n_fft * chunks_per_datagram
    n_dgrams = np.asarray(samples).size // per
    frames = np.asarray(samples, dtype=np.complex64)[: n_dgrams * per].reshape(n_dgrams, per)
    period = per / fs if (paced and fs) else 0.0
    sent = 0
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        start = time.monotonic()
        for i, frame in enumerate(frames):
            seq = first_seq + i * chunks_per_datagram
            if period:
                delay = start + i * period - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            if seq in skip:
                continue
            sock.sendto(SEQ_HEADER.pack(seq) + encode_samples(frame, sample_format), address)
            sent += 1
        if end_marker:
            sock.sendto(SEQ_HEADER.pack(first_seq + n_dgrams * chunks_per_datagram), address)
    return sent


def ingest(source: Source, config: FrontendConfig) -> Iterator[IQChunk]:
    """Yield gap-free chunks from ``source``; a gap raises :class:`OverrunError`."""
    for item in source.blocks(config.n_fft, max_chunks=64):
        if isinstance(item, Gap):
            raise OverrunError(item.count, f"{item.count} chunk(s) lost at seq {item.seq}")
        seq, block = item
        for i, samples in enumerate(block):
            yield IQChunk(seq + i, samples)


def open_source(spec: str, config: FrontendConfig, sample_format: str = "cf32",
                paced: bool = False, chunks_per_datagram: int = 1,
                idle_timeout: float = 2.0) -> Source:
    """``udp://host:port`` opens a datagram listener; anything else is a file path."""
    if spec.startswith("udp://"):
        host, _, port = spec[len("udp://"):].rpartition(":")
        return DatagramSource(host or "0.0.0.0", int(port), config.n_fft,
                              chunks_per_datagram=chunks_per_datagram,
                              sample_format=sample_format, idle_timeout=idle_timeout)
    return FileSource(spec, sample_format=sample_format, fs=config.fs, paced=paced)
