"""Matte quality metrics.

Per-matte errors (MAD, MSE, Grad, Conn) are computed per frame and then
averaged over frames.  Conn is reported as a score, ``1 - error``, so that
higher is better.  Instance-aware scores (RQ, TQ, MQ, VIMQ) are percentages.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, ShapeError


def _frames(x) -> np.ndarray:
    """Coerce to ``(T, H, W)`` float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4 and x.shape[-1] == 1:
        return x[..., 0]
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3:
        return x
    raise ShapeError(f"expected (T, H, W, 1), (T, H, W) or (H, W) matte, got {x.shape}")


def _pair(pred, gt):
    p, g = _frames(pred), _frames(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return p, g


def mad(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean(np.abs(p - g)))


def mse(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean((p - g) ** 2))


# ---------------------------------------------------------------------------
# Gradient


@lru_cache(maxsize=8)
def gaussian_derivative_kernel(sigma: float) -> np.ndarray:
    """x-derivative-of-Gaussian kernel, L2-normalized; transpose for y."""
    eps = 1e-2
    half = int(np.ceil(sigma * np.sqrt(-2.0 * np.log(np.sqrt(2.0 * np.pi) * sigma * eps))))
    u = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(u**2) / (2 * sigma**2)) / (sigma * np.sqrt(2 * np.pi))
    dg = -u * g / sigma**2
    k = np.outer(g, dg)
    k /= np.sqrt(np.sum(k * k))
    k.flags.writeable = False
    return k


def gradient_magnitude(frame: np.ndarray, sigma: float = 1.4) -> np.ndarray:
    k = gaussian_derivative_kernel(float(sigma))
    gx = ndimage.convolve(frame, k, mode="nearest")
    gy = ndimage.convolve(frame, k.T, mode="nearest")
    return np.sqrt(gx**2 + gy**2)


def grad_metric(pred, gt, sigma: float = 1.4) -> float:
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    p, g = _pair(pred, gt)
    per_frame = [
        np.mean((gradient_magnitude(a, sigma) - gradient_magnitude(b, sigma)) ** 2)
        for a, b in zip(p, g)
    ]
    return float(np.mean(per_frame))


# ---------------------------------------------------------------------------
# Connectivity


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected component of ``mask``; ties go to the first in raster order."""
    labels, n = ndimage.label(mask)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def _thresholds(step: float) -> np.ndarray:
    n = int(round(1.0 / step))
    return np.linspace(0.0, n * step, n + 1)


def connectivity_level_map(pred: np.ndarray, gt: np.ndarray, step: float) -> np.ndarray:
    """Per pixel, the last threshold at which it was still in the common source region."""
    ths = _thresholds(step)
    level = np.full(pred.shape, -1.0)
    for i in range(1, len(ths)):
        omega = largest_component((pred >= ths[i]) & (gt >= ths[i]))
        level[(level == -1) & ~omega] = ths[i - 1]
    level[level == -1] = 1.0
    return level


def connectivity_error_frame(pred: np.ndarray, gt: np.ndarray, step: float = 0.1) -> float:
    """Per-pixel mean connectivity error of one frame, in [0, 1]."""
    level = connectivity_level_map(pred, gt, step)
    dp, dg = pred - level, gt - level
    phi_p = 1.0 - dp * (dp >= 0.15)
    phi_g = 1.0 - dg * (dg >= 0.15)
    return float(np.mean(np.abs(phi_p - phi_g)))


def conn_metric(pred, gt, step: float = 0.1) -> float:
    if not 0 < step < 1:
        raise ConfigError("step must be in (0, 1)")
    p, g = _pair(pred, gt)
    err = np.mean([connectivity_error_frame(a, b, step) for a, b in zip(p, g)])
    return float(1.0 - err)


@dataclass
class MatteMetricsReport:
    mad: float
    mse: float
    grad: float
    conn: float
    per_frame: list[dict] = field(default_factory=list)


def evaluate_matte(pred, gt, sigma: float = 1.4, step: float = 0.1) -> MatteMetricsReport:
    p, g = _pair(pred, gt)
    frames = []
    for a, b in zip(p, g):
        frames.append(
            {
                "mad": mad(a, b),
                "mse": mse(a, b),
                "grad": grad_metric(a, b, sigma),
                "conn": conn_metric(a, b, step),
            }
        )
    return MatteMetricsReport(
        mad=float(np.mean([f["mad"] for f in frames])),
        mse=float(np.mean([f["mse"] for f in frames])),
        grad=float(np.mean([f["grad"] for f in frames])),
        conn=float(np.mean([f["conn"] for f in frames])),
        per_frame=frames,
    )


# ---------------------------------------------------------------------------
# Instance-aware scores


def binarize(x) -> np.ndarray:
    return _frames(x) >= 0.5


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two boolean masks; two empty masks count as a perfect match."""
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass(frozen=True)
class Match:
    pred_index: int
    gt_id: int
    iou: float


def iou_matrix(preds: Sequence, gts: Sequence) -> np.ndarray:
    pb = [binarize(p) for p in preds]
    gb = [binarize(g) for g in gts]
    out = np.zeros((len(pb), len(gb)))
    for i, p in enumerate(pb):
        for j, g in enumerate(gb):
            if p.shape != g.shape:
                raise ShapeError(f"prediction {i} {p.shape} vs ground truth {j} {g.shape}")
            out[i, j] = iou(p, g)
    return out


def match_instances(
    preds: Sequence[tuple[str, np.ndarray]],
    gts: Sequence[tuple[int, np.ndarray]],
    iou_thresh: float = 0.5,
) -> list[Match]:
    """One-to-one assignment maximizing total spatiotemporal IoU."""
    if not gts:
        raise ConfigError("match_instances needs at least one ground-truth instance")
    if not 0 < iou_thresh < 1:
        raise ConfigError("iou_thresh must be in (0, 1)")
    if not preds:
        return []
    m = iou_matrix([p for _, p in preds], [g for _, g in gts])
    rows, cols = linear_sum_assignment(m, maximize=True)
    return [
        Match(int(r), int(gts[c][0]), float(m[r, c]))
        for r, c in zip(rows, cols)
        if m[r, c] >= iou_thresh
    ]


@dataclass
class InstanceEvalReport:
    rq: float
    tq: float
    mq: float
    vimq: float
    matching: list[Match] = field(default_factory=list)

    @classmethod
    def from_components(cls, rq: float, tq: float, mq: float, matching=()) -> "InstanceEvalReport":
        return cls(rq, tq, mq, rq * tq * mq / 10000.0, list(matching))


def vim_scores(
    preds: Sequence[tuple[str, np.ndarray]],
    gts: Sequence[tuple[int, np.ndarray]],
    iou_thresh: float = 0.5,
) -> InstanceEvalReport:
    """RQ: F-measure of matched instances.  TQ: share of frames whose IoU
    clears the threshold, averaged over matches.  MQ: mean (1 - MSE) over
    matches.  VIMQ: RQ * TQ * MQ / 10000.
    """
    matches = match_instances(preds, gts, iou_thresh)
    tp = len(matches)
    fp, fn = len(preds) - tp, len(gts) - tp
    rq = 100.0 * 2 * tp / (2 * tp + fp + fn)
    if tp == 0:
        return InstanceEvalReport.from_components(rq, 0.0, 0.0, matches)
    gt_by_id = {gid: g for gid, g in gts}
    tqs, mqs = [], []
    for m in matches:
        p, g = _pair(preds[m.pred_index][1], gt_by_id[m.gt_id])
        pb, gb = p >= 0.5, g >= 0.5
        tqs.append(np.mean([iou(a, b) >= iou_thresh for a, b in zip(pb, gb)]))
        mqs.append(1.0 - np.mean((p - g) ** 2))
    return InstanceEvalReport.from_components(
        rq, 100.0 * float(np.mean(tqs)), 100.0 * float(np.mean(mqs)), matches
    )
