"""Built-in coexistence scenarios at 100 MSps.

Each preset describes the traffic inside one TF-plot window as fractions of the
window span, so the same pattern works for any ``(T, F)``. Windows are tiled
``n_plots`` times with seeded jitter on burst start times. Technologies are
surrogates: BLE-like bursts are 2 MHz flat blocks, OFDM Wi-Fi is a 20 MHz flat
block and DSSS Wi-Fi is a 30 MHz block with tapered edges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .signals import Scenario, SignalKind, SignalSpec, power_for_snr

FS = 100e6
NOISE_POWER = 1e-8  # per Hz; unit sample variance at 100 MSps

BLE_BW, OFDM_BW, DSSS_BW = 2e6, 20e6, 30e6
BLE_SNR, OFDM_SNR, DSSS_SNR = 15.0, 20.0, 14.0


@dataclass(frozen=True)
class Burst:
    """One transmission; times are fractions of the window span."""
    kind: SignalKind
    center_freq: float
    bandwidth: float
    start: float
    duration: float
    snr_db: float


def ble(fc: float, start: float, duration: float = 0.025) -> Burst:
    return Burst(SignalKind.OFDM_LIKE, fc, BLE_BW, start, duration, BLE_SNR)


def ofdm(fc: float, start: float, duration: float) -> Burst:
    return Burst(SignalKind.OFDM_LIKE, fc, OFDM_BW, start, duration, OFDM_SNR)


def dsss(fc: float, start: float, duration: float, bw: float = DSSS_BW) -> Burst:
    return Burst(SignalKind.NOISE_LIKE, fc, bw, start, duration, DSSS_SNR)


def _sparse(rng: np.random.Generator) -> list[Burst]:
    return [
        ble(-40e6, 0.06),
        ofdm(10e6, 0.15, 0.20),
        dsss(-15e6, 0.50, 0.25),
        ble(38e6, 0.62),
    ]


def _default(rng: np.random.Generator) -> list[Burst]:
    bursts = [ofdm(-25e6, s, 0.14) for s in (0.05, 0.36, 0.67)]
    bursts.append(dsss(22e6, 0.20, 0.30))
    # BLE hopping anywhere in the band, including over Wi-Fi
    for start in (0.10, 0.30, 0.52, 0.74, 0.90):
        bursts.append(ble(float(rng.uniform(-45e6, 45e6)), start, 0.02))
    return bursts


def _control(rng: np.random.Generator) -> list[Burst]:
    # BLE advertising on one channel, Wi-Fi on two non-overlapping channels
    bursts = [ble(30e6, 0.02 + 0.08 * i, 0.02) for i in range(12)]
    t = 0.03
    while t < 0.85:
        bursts.append(ofdm(-28e6, t, 0.07))
        t += 0.07 + float(rng.uniform(0.004, 0.03))
    for start in (0.12, 0.55):
        bursts.append(ofdm(2e6, start, 0.22))
    return bursts


def _dense_mixed(rng: np.random.Generator) -> list[Burst]:
    bursts = []
    for fc in (-36e6, -14e6):
        t = float(rng.uniform(0.0, 0.05))
        while t < 0.85:
            dur = float(rng.uniform(0.05, 0.15))
            bursts.append(ofdm(fc, t, dur))
            t += dur + float(rng.uniform(0.003, 0.04))
    t = float(rng.uniform(0.0, 0.05))
    while t < 0.8:
        dur = float(rng.uniform(0.1, 0.2))
        bursts.append(dsss(24e6, t, dur))
        t += dur + float(rng.uniform(0.01, 0.05))
    for start in np.linspace(0.05, 0.9, 8):
        fc = float(rng.choice([-47e6, -25e6, -3e6, 44e6, 47e6]))
        bursts.append(ble(fc, float(start), 0.02))
    return bursts


def _dense_noise(rng: np.random.Generator) -> list[Burst]:
    bursts = []
    for fc in (-22e6, 20e6):
        t = float(rng.uniform(0.0, 0.05))
        while t < 0.85:
            dur = float(rng.uniform(0.05, 0.15))
            bursts.append(dsss(fc, t, dur))
            t += dur + float(rng.uniform(0.01, 0.05))
    return bursts


PRESETS: dict[str, Callable[[np.random.Generator], list[Burst]]] = {
    "sparse": _sparse,
    "default": _default,
    "control": _control,
    "dense_mixed": _dense_mixed,
    "dense_noise": _dense_noise,
}

SUITE = tuple(PRESETS)


def build(name: str, plot_height: int = 2000, n_fft: int = 1024, n_plots: int = 1,
          seed: int = 0, snr_db: float | None = None, jitter: float = 0.02,
          fs: float = FS, noise_power: float = NOISE_POWER) -> Scenario:
    """Render preset ``name`` over ``n_plots`` windows of ``plot_height`` FFT rows.

    ``snr_db`` overrides every signal's nominal SNR (for sweeps).
    """
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    span = plot_height * n_fft / fs
    rng = np.random.default_rng(seed)
    signals = []
    for w in range(n_plots):
        for b in PRESETS[name](rng):
            start = min(max(b.start + rng.uniform(-jitter, jitter), 0.0), 1.0 - b.duration)
            snr = b.snr_db if snr_db is None else snr_db
            signals.append(SignalSpec(
                kind=b.kind,
                center_freq=b.center_freq,
                bandwidth=b.bandwidth,
                t_start=(w + start) * span,
                duration=b.duration * span,
                power=power_for_snr(snr, b.bandwidth, noise_power),
            ))
    return Scenario(fs=fs, total_duration=n_plots * span, signals=signals,
                    noise_power=noise_power, seed=seed)


def noise_only(plot_height: int = 2000, n_fft: int = 1024, n_plots: int = 1, seed: int = 0,
               fs: float = FS, noise_power: float = NOISE_POWER) -> Scenario:
    return Scenario(fs=fs, total_duration=n_plots * plot_height * n_fft / fs, signals=[],
                    noise_power=noise_power, seed=seed)
