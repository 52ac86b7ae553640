"""Time-frequency bounding boxes.

A box is ``(f0, f1, t0, t1)`` in physical units: Hz relative to the receiver
center frequency and seconds from the start of the stream. Bin-index forms are
half-open ``[k0, k1) x [r0, r1)`` on an FFT-shifted plot, where column ``k`` is
centered on ``(k - F/2) * df`` and row ``r`` covers ``[r * dt, (r + 1) * dt)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# absorbs float noise when a physical edge sits exactly on a bin edge
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class BoundingBox:
    f0: float
    f1: float
    t0: float
    t1: float

    def __post_init__(self):
        if self.f1 < self.f0 or self.t1 < self.t0:
            raise ValueError(f"malformed box {self!r}: need f1 >= f0 and t1 >= t0")

    @property
    def bandwidth(self) -> float:
        return self.f1 - self.f0

    @property
    def duration(self) -> float:
        return self.t1 - self.t0

    @property
    def area(self) -> float:
        return self.bandwidth * self.duration

    def width_bins(self, df: float) -> int:
        """Number of ``df``-wide bins needed to span the box bandwidth."""
        return math.ceil(self.bandwidth / df - _EDGE_EPS)

    def to_bins(self, n_fft: int, df: float, dt: float, start_seq: int = 0,
                n_rows: int | None = None) -> tuple[int, int, int, int]:
        """Half-open ``(k0, k1, r0, r1)`` covering the box, clipped to the plot."""
        half = n_fft / 2 + 0.5
        k0 = math.floor(self.f0 / df + half + _EDGE_EPS)
        k1 = math.ceil(self.f1 / df + half - _EDGE_EPS)
        r0 = math.floor(self.t0 / dt - start_seq + _EDGE_EPS)
        r1 = math.ceil(self.t1 / dt - start_seq - _EDGE_EPS)
        k0, k1 = max(k0, 0), min(k1, n_fft)
        r0 = max(r0, 0)
        if n_rows is not None:
            r1 = min(r1, n_rows)
        return k0, k1, r0, r1

    @classmethod
    def from_bins(cls, k0: int, k1: int, r0: int, r1: int, n_fft: int, df: float,
                  dt: float, start_seq: int = 0) -> "BoundingBox":
        """Inverse of :meth:`to_bins` for half-open bin ranges."""
        half = n_fft / 2 + 0.5
        return cls(
            f0=(k0 - half) * df,
            f1=(k1 - half) * df,
            t0=(start_seq + r0) * dt,
            t1=(start_seq + r1) * dt,
        )
