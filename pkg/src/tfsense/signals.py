"""Synthetic annotated I/Q scenarios and the on-disk interchange formats.

Signals are spectral-shape surrogates, not protocol waveforms:

* ``tone-burst``: a complex sinusoid at ``center_freq``; ``bandwidth`` only
  sets the annotated extent.
* ``ofdm-like``: band-limited Gaussian noise with brick-wall edges.
* ``noise-like``: band-limited Gaussian noise whose power response rolls off
  with a raised cosine centered on the band edges, so the half-power points
  sit exactly at ``center_freq +/- bandwidth / 2``.

Samples are written as ``.32cf``: interleaved little-endian float32 I then Q,
no header. Ground truth is a JSON document with one record per box.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import scipy.fft as sfft
import yaml

from .boxes import BoundingBox

logger = logging.getLogger(__name__)

GT_VERSION = 1
# raised-cosine rolloff of noise-like spectra, as a fraction of the bandwidth
NOISE_LIKE_ROLLOFF = 0.2


class ValidationError(ValueError):
    """A scenario or signal description is invalid; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class FormatError(ValueError):
    """Sample file is not a whole number of complex samples."""


class SchemaError(ValueError):
    """Ground-truth document is missing a required field."""

    def __init__(self, field: str):
        super().__init__(f"missing field '{field}'")
        self.field = field


class SignalKind(str, Enum):
    TONE_BURST = "tone-burst"
    OFDM_LIKE = "ofdm-like"
    NOISE_LIKE = "noise-like"


@dataclass(frozen=True)
class SignalSpec:
    kind: SignalKind
    center_freq: float
    bandwidth: float
    t_start: float
    duration: float
    power: float

    def __post_init__(self):
        object.__setattr__(self, "kind", SignalKind(self.kind))

    @property
    def t_end(self) -> float:
        return self.t_start + self.duration

    def box(self) -> BoundingBox:
        half = self.bandwidth / 2
        return BoundingBox(self.center_freq - half, self.center_freq + half,
                           self.t_start, self.t_end)

    def validate(self, fs: float, where: str = "signal") -> None:
        if not self.bandwidth > 0:
            raise ValidationError(f"{where}.bandwidth", "must be > 0")
        if not self.duration > 0:
            raise ValidationError(f"{where}.duration", "must be > 0")
        if self.t_start < 0:
            raise ValidationError(f"{where}.t_start", "must be >= 0")
        if self.power < 0:
            raise ValidationError(f"{where}.power", "must be >= 0")
        lo = self.center_freq - self.bandwidth / 2
        hi = self.center_freq + self.bandwidth / 2
        if lo < -fs / 2 or hi > fs / 2:
            raise ValidationError(
                f"{where}.center_freq",
                f"band [{lo:g}, {hi:g}] Hz leaves [-fs/2, fs/2] = [{-fs / 2:g}, {fs / 2:g}]")


@dataclass
class Scenario:
    fs: float
    total_duration: float
    signals: list[SignalSpec] = field(default_factory=list)
    noise_power: float = 0.0  # linear power per Hz
    seed: int = 0

    @property
    def n_samples(self) -> int:
        return int(round(self.fs * self.total_duration))

    def validate(self) -> None:
        if not self.fs > 0:
            raise ValidationError("fs", "must be > 0")
        if self.noise_power < 0:
            raise ValidationError("noise_power", "must be >= 0")
        for i, sig in enumerate(self.signals):
            sig.validate(self.fs, where=f"signals[{i}]")
        latest = max((s.t_end for s in self.signals), default=0.0)
        if self.total_duration < latest * (1 - 1e-12):
            raise ValidationError(
                "total_duration", f"{self.total_duration:g} s ends before the last signal ({latest:g} s)")


@dataclass
class GroundTruth:
    boxes: list[BoundingBox] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)
    fs: float | None = None
    duration: float | None = None

    def __len__(self) -> int:
        return len(self.boxes)


def power_for_snr(snr_db: float, bandwidth: float, noise_power: float) -> float:
    """Linear signal power giving ``snr_db`` against the noise in ``bandwidth``."""
    return noise_power * bandwidth * 10 ** (snr_db / 10)


def _band_response(freqs: np.ndarray, sig: SignalSpec) -> np.ndarray:
    offset = np.abs(freqs - sig.center_freq)
    half = sig.bandwidth / 2
    if sig.kind is SignalKind.OFDM_LIKE:
        return (offset <= half).astype(float)
    # raised cosine in power, 0.5 at the band edge
    roll = NOISE_LIKE_ROLLOFF * sig.bandwidth
    lo, hi = half - roll / 2, half + roll / 2
    resp = np.zeros_like(freqs)
    resp[offset <= lo] = 1.0
    mid = (offset > lo) & (offset < hi)
    resp[mid] = 0.5 * (1 + np.cos(np.pi * (offset[mid] - lo) / roll))
    return resp


def _render(sig: SignalSpec, fs: float, n0: int, n1: int, rng: np.random.Generator) -> np.ndarray:
    length = n1 - n0
    if sig.kind is SignalKind.TONE_BURST:
        phase = rng.uniform(0, 2 * np.pi)
        n = np.arange(n0, n1)
        return math.sqrt(sig.power) * np.exp(1j * (2 * np.pi * sig.center_freq / fs * n + phase))
    white = rng.standard_normal(length) + 1j * rng.standard_normal(length)
    spectrum = sfft.fft(white)
    spectrum *= np.sqrt(_band_response(sfft.fftfreq(length, 1 / fs), sig))
    out = sfft.ifft(spectrum, overwrite_x=True)
    realized = np.mean(np.abs(out) ** 2)
    if realized > 0:
        out *= math.sqrt(sig.power / realized)
    return out


def synthesize(scenario: Scenario) -> tuple[np.ndarray, GroundTruth]:
    """Render a scenario to complex64 samples plus one ground-truth box per signal."""
    scenario.validate()
    fs = scenario.fs
    n = scenario.n_samples
    rng = np.random.default_rng(scenario.seed)
    sigma = math.sqrt(scenario.noise_power * fs / 2)
    if sigma > 0:
        x = sigma * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    else:
        x = np.zeros(n, dtype=np.complex128)
    gt = GroundTruth(fs=fs, duration=scenario.total_duration)
    for sig in scenario.signals:
        n0 = min(int(round(sig.t_start * fs)), n)
        n1 = min(int(round(sig.t_end * fs)), n)
        if n1 > n0:
            x[n0:n1] += _render(sig, fs, n0, n1, rng)
        gt.boxes.append(sig.box())
        gt.labels.append(sig.kind.value)
    return x.astype(np.complex64), gt


def measure_snr(samples: np.ndarray, gt: GroundTruth, fs: float, n_fft: int = 1024,
                guard_bins: int = 20, noise_power: float | None = None) -> np.ndarray:
    """Per-box SNR in dB: in-band signal power over noise power in the box bandwidth.

    When ``noise_power`` (per Hz) is not given, the noise density is estimated
    from periodogram cells (Hann window) outside every box, so the caller does
    not need the clean components; ``guard_bins`` on each side of a box keep
    band skirts and window leakage out of that estimate. Returns ``+inf`` for a box when the noise
    power is zero (or numerically zero) and ``nan`` when it cannot be estimated.
    """
    x = np.asarray(samples)
    n_frames = x.size // n_fft
    out = np.full(len(gt.boxes), np.nan)
    if n_frames == 0 or not gt.boxes:
        return out
    win = np.hanning(n_fft + 1)[:-1]
    frames = x[: n_frames * n_fft].reshape(n_frames, n_fft).astype(np.complex128) * win
    cells = np.abs(sfft.fftshift(sfft.fft(frames, axis=1), axes=1)) ** 2
    cells /= n_fft * np.sum(win ** 2)
    df = fs / n_fft
    dt = n_fft / fs

    covered = np.zeros(cells.shape, dtype=bool)
    spans = []
    for box in gt.boxes:
        k0, k1, r0, r1 = box.to_bins(n_fft, df, dt, n_rows=n_frames)
        k0g, k1g = max(k0 - guard_bins, 0), min(k1 + guard_bins, n_fft)
        covered[r0:r1, k0g:k1g] = True
        # frames fully inside the burst, falling back to any overlap
        f0 = max(math.ceil(box.t0 / dt - 1e-9), 0)
        f1 = min(math.floor(box.t1 / dt + 1e-9), n_frames)
        if f1 <= f0:
            f0, f1 = r0, r1
        spans.append((k0g, k1g, f0, f1))
    peak = float(cells.max())
    if noise_power is not None:
        # periodogram cells are normalized to power per bin
        noise_bin = noise_power * df
    elif covered.all():
        return out
    else:
        noise_bin = float(np.mean(cells[~covered]))
    for i, (box, (k0, k1, f0, f1)) in enumerate(zip(gt.boxes, spans)):
        if f1 <= f0:
            continue
        band = cells[f0:f1, k0:k1]
        p_total = float(np.mean(np.sum(band, axis=1)))
        if noise_bin <= 1e-10 * peak:
            out[i] = np.inf if p_total > 0 else np.nan
            continue
        p_sig = p_total - (k1 - k0) * noise_bin
        p_noise = noise_bin * box.bandwidth / df
        out[i] = 10 * np.log10(p_sig / p_noise) if p_sig > 0 else -np.inf
    return out


# ---------------------------------------------------------------------------
# file formats


def write_iq(path: str | Path, samples: np.ndarray) -> None:
    np.asarray(samples, dtype=np.complex64).view(np.float32).astype("<f4").tofile(path)


def read_iq(path: str | Path) -> np.ndarray:
    """Load a ``.32cf`` file as complex64."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 8:
        raise FormatError(f"{path}: {raw.size} bytes is not a whole number of I/Q pairs")
    return raw.view("<f4").astype(np.float32).view(np.complex64)


def gt_to_dict(gt: GroundTruth) -> dict[str, Any]:
    doc: dict[str, Any] = {"version": GT_VERSION}
    if gt.fs is not None:
        doc["fs"] = gt.fs
    if gt.duration is not None:
        doc["duration"] = gt.duration
    doc["boxes"] = [
        {"label": label, "t_start": b.t0, "t_end": b.t1, "f_start": b.f0, "f_end": b.f1}
        for b, label in zip(gt.boxes, gt.labels)
    ]
    return doc


def gt_from_dict(doc: dict[str, Any]) -> GroundTruth:
    if "boxes" not in doc:
        raise SchemaError("boxes")
    gt = GroundTruth(fs=doc.get("fs"), duration=doc.get("duration"))
    for i, rec in enumerate(doc["boxes"]):
        for key in ("label", "t_start", "t_end", "f_start", "f_end"):
            if key not in rec:
                raise SchemaError(f"boxes[{i}].{key}")
        gt.boxes.append(BoundingBox(float(rec["f_start"]), float(rec["f_end"]),
                                    float(rec["t_start"]), float(rec["t_end"])))
        gt.labels.append(str(rec["label"]))
    return gt


def write_gt(path: str | Path, gt: GroundTruth) -> None:
    Path(path).write_text(json.dumps(gt_to_dict(gt), indent=2) + "\n", encoding="utf-8")


def read_gt(path: str | Path) -> GroundTruth:
    return gt_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# declarative scenario configs


def _require(rec: dict, key: str, where: str) -> Any:
    if key not in rec:
        raise ValidationError(f"{where}.{key}" if where else key, "required")
    return rec[key]


def scenario_from_dict(doc: dict[str, Any]) -> Scenario:
    """Build a scenario from a config mapping.

    Each signal gives either ``power`` (linear) or ``snr_db``; the latter is
    converted against ``noise_power`` over the signal bandwidth.
    """
    fs = float(_require(doc, "fs", ""))
    noise_power = float(doc.get("noise_power", 0.0))
    signals = []
    for i, rec in enumerate(doc.get("signals") or []):
        where = f"signals[{i}]"
        kind = _require(rec, "kind", where)
        try:
            kind = SignalKind(kind)
        except ValueError:
            raise ValidationError(f"{where}.kind",
                                  f"unknown kind {kind!r}; expected one of "
                                  f"{[k.value for k in SignalKind]}") from None
        bandwidth = float(_require(rec, "bandwidth", where))
        if "power" in rec:
            power = float(rec["power"])
        elif "snr_db" in rec:
            power = power_for_snr(float(rec["snr_db"]), bandwidth, noise_power)
        else:
            raise ValidationError(f"{where}.power", "required (or give snr_db)")
        signals.append(SignalSpec(
            kind=kind,
            center_freq=float(_require(rec, "center_freq", where)),
            bandwidth=bandwidth,
            t_start=float(_require(rec, "t_start", where)),
            duration=float(_require(rec, "duration", where)),
            power=power,
        ))
    scenario = Scenario(
        fs=fs,
        total_duration=float(_require(doc, "duration", "")),
        signals=signals,
        noise_power=noise_power,
        seed=int(doc.get("seed", 0)),
    )
    scenario.validate()
    return scenario


def scenario_to_dict(scenario: Scenario) -> dict[str, Any]:
    return {
        "fs": scenario.fs,
        "duration": scenario.total_duration,
        "noise_power": scenario.noise_power,
        "seed": scenario.seed,
        "signals": [
            {"kind": s.kind.value, "center_freq": s.center_freq, "bandwidth": s.bandwidth,
             "t_start": s.t_start, "duration": s.duration, "power": s.power}
            for s in scenario.signals
        ],
    }


def load_scenario(path: str | Path) -> Scenario:
    """Read a YAML (or JSON) scenario config."""
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValidationError("<root>", "config must be a mapping")
    return scenario_from_dict(doc)
