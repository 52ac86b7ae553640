"""IoU-based detection scoring.

Counting follows the strict inequalities of the usual definition: a ground-truth
box is detected when its best IoU is strictly above the threshold, and a
detection is false when its best IoU is strictly below it. A maximum exactly at
the threshold counts as neither.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .boxes import BoundingBox


@dataclass(frozen=True)
class EvalResult:
    theta_iou: float
    n_gt: int
    n_d: int
    n_t: int
    n_f: int
    p_d: float
    p_fa: float
    mean_iou: float


EVAL_FIELDS = ("theta_iou", "n_gt", "n_d", "n_t", "n_f", "p_d", "p_fa", "mean_iou")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    if a.area <= 0 or b.area <= 0:
        return 0.0
    wf = min(a.f1, b.f1) - max(a.f0, b.f0)
    wt = min(a.t1, b.t1) - max(a.t0, b.t0)
    if wf <= 0 or wt <= 0:
        return 0.0
    inter = wf * wt
    return inter / (a.area + b.area - inter)


def iou_bins(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    """IoU of half-open bin ranges ``(k0, k1, r0, r1)``; a debugging aid."""
    area_a = max(a[1] - a[0], 0) * max(a[3] - a[2], 0)
    area_b = max(b[1] - b[0], 0) * max(b[3] - b[2], 0)
    if not area_a or not area_b:
        return 0.0
    wk = min(a[1], b[1]) - max(a[0], b[0])
    wr = min(a[3], b[3]) - max(a[2], b[2])
    if wk <= 0 or wr <= 0:
        return 0.0
    inter = wk * wr
    return inter / (area_a + area_b - inter)


def iou_matrix(gt: Sequence[BoundingBox], det: Sequence[BoundingBox]) -> np.ndarray:
    """(N_gt, N_d) IoU matrix in physical units."""
    if not gt or not det:
        return np.zeros((len(gt), len(det)))
    g = np.array([[b.f0, b.f1, b.t0, b.t1] for b in gt], dtype=np.float64)
    d = np.array([[b.f0, b.f1, b.t0, b.t1] for b in det], dtype=np.float64)
    wf = np.minimum(g[:, None, 1], d[None, :, 1]) - np.maximum(g[:, None, 0], d[None, :, 0])
    wt = np.minimum(g[:, None, 3], d[None, :, 3]) - np.maximum(g[:, None, 2], d[None, :, 2])
    inter = np.clip(wf, 0, None) * np.clip(wt, 0, None)
    ga = (g[:, 1] - g[:, 0]) * (g[:, 3] - g[:, 2])
    da = (d[:, 1] - d[:, 0]) * (d[:, 3] - d[:, 2])
    union = ga[:, None] + da[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where((ga[:, None] > 0) & (da[None, :] > 0) & (union > 0), inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def count(matrix: np.ndarray, theta_iou: float) -> tuple[int, int]:
    m = np.asarray(matrix, dtype=np.float64)
    n_gt, n_d = m.shape
    # an empty side has best IoU 0: detections without ground truth are false
    best_gt = m.max(axis=1) if n_d else np.zeros(n_gt)
    best_det = m.max(axis=0) if n_gt else np.zeros(n_d)
    return int(np.sum(best_gt > theta_iou)), int(np.sum(best_det < theta_iou))


def _result(matrix: np.ndarray, theta_iou: float) -> EvalResult:
    n_gt, n_d = matrix.shape
    n_t, n_f = count(matrix, theta_iou)
    best = matrix.max(axis=1) if n_d else np.zeros(n_gt)
    return EvalResult(
        theta_iou=float(theta_iou), n_gt=n_gt, n_d=n_d, n_t=n_t, n_f=n_f,
        p_d=n_t / n_gt if n_gt else 0.0,
        p_fa=n_f / n_d if n_d else 0.0,
        mean_iou=float(best.mean()) if n_gt else 0.0,
    )


def evaluate(gt: Sequence[BoundingBox], det: Sequence[BoundingBox], theta_iou: float = 0.5) -> EvalResult:
    return _result(iou_matrix(gt, det), theta_iou)


def evaluate_matrix(matrix: np.ndarray, theta_iou: float) -> EvalResult:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"IoU matrix must be 2-D, got shape {m.shape}")
    return _result(m, theta_iou)


def sweep(gt: Sequence[BoundingBox], det: Sequence[BoundingBox], thetas: Iterable[float]) -> list[EvalResult]:
    thetas = list(thetas)
    if any(b < a for a, b in zip(thetas, thetas[1:])):
        raise ValueError("thetas must be sorted ascending")
    m = iou_matrix(gt, det)
    return [_result(m, th) for th in thetas]


# ---------------------------------------------------------------------------
# multi-plot aggregation


def clip_to_window(boxes: Sequence[BoundingBox], t0: float, t1: float) -> list[BoundingBox]:
    """Boxes restricted to ``[t0, t1)``; boxes not overlapping it are dropped."""
    out = []
    for b in boxes:
        lo, hi = max(b.t0, t0), min(b.t1, t1)
        if hi > lo:
            out.append(BoundingBox(b.f0, b.f1, lo, hi))
    return out


class Tally:
    """Accumulates per-plot matches so results pool over many plots."""

    def __init__(self):
        self.best_gt, self.best_det = [], []

    def add(self, gt: Sequence[BoundingBox], det: Sequence[BoundingBox]) -> None:
        m = iou_matrix(gt, det)
        if m.shape[0]:
            self.best_gt.extend(m.max(axis=1) if m.shape[1] else np.zeros(m.shape[0]))
        if m.shape[1]:
            self.best_det.extend(m.max(axis=0) if m.shape[0] else np.zeros(m.shape[1]))

    def result(self, theta_iou: float) -> EvalResult:
        g = np.asarray(self.best_gt, dtype=np.float64)
        d = np.asarray(self.best_det, dtype=np.float64)
        n_t = int(np.sum(g > theta_iou))
        n_f = int(np.sum(d < theta_iou))
        return EvalResult(
            theta_iou=float(theta_iou), n_gt=g.size, n_d=d.size, n_t=n_t, n_f=n_f,
            p_d=n_t / g.size if g.size else 0.0,
            p_fa=n_f / d.size if d.size else 0.0,
            mean_iou=float(g.mean()) if g.size else 0.0,
        )

    def sweep(self, thetas: Iterable[float]) -> list[EvalResult]:
        return [self.result(t) for t in thetas]


def evaluate_windows(gt: Sequence[BoundingBox], det: Sequence[BoundingBox], span: float,
                     n_windows: int | None = None, t_origin: float = 0.0) -> Tally:
    """Score plot by plot: each window's ground truth is clipped to the window."""
    if n_windows is None:
        end = max([b.t1 for b in gt] + [b.t1 for b in det], default=t_origin)
        n_windows = max(math.ceil((end - t_origin) / span - 1e-9), 0)
    tally = Tally()
    for w in range(n_windows):
        a, b = t_origin + w * span, t_origin + (w + 1) * span
        g = clip_to_window(gt, a, b)
        d = [x for x in det if a - 1e-12 <= (x.t0 + x.t1) / 2 < b]
        tally.add(g, d)
    return tally


def write_eval_csv(path: str | Path, results: Sequence[EvalResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_FIELDS)
        w.writeheader()
        for r in results:
            w.writerow(asdict(r))
