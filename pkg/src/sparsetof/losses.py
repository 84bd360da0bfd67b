"""Training losses and evaluation metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .normals import normals_array
from .preproc import D_MAX

LAMBDA_N_DEFAULT = 1e-3


@dataclass
class LossConfig:
    p: int = 1
    lambda_n: float = LAMBDA_N_DEFAULT
    # "sum": per-sample pixel sum averaged over samples (literal reading);
    # "mean": per-pixel average, offered for comparison runs only.
    lp_reduction: str = "sum"

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError(f"p must be 1 or 2, got {self.p}")
        if self.lambda_n < 0:
            raise ValueError("lambda_n must be >= 0")
        if self.lp_reduction not in ("sum", "mean"):
            raise ValueError(f"unknown lp_reduction {self.lp_reduction!r}")


def _mask_array(mask, shape) -> np.ndarray:
    m = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    if not m.any():
        raise ValueError("empty mask: no valid pixels for the loss")
    return m


def loss_lp(pred, gt, mask, p: int = 1, reduction: str = "sum") -> T.Tensor:
    """(1/J) * sum_j ||vec(pred_j - gt_j)||_p^p over valid pixels."""
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    if pred.shape != gt.shape:
        raise T.ShapeError(f"loss_lp: pred {pred.shape} vs gt {gt.shape}")
    m = _mask_array(mask, pred.shape)
    diff = (pred - gt) * m.astype(np.float32)
    if p == 1:
        per_pixel = T.tabs(diff)
    elif p == 2:
        per_pixel = diff * diff
    else:
        raise ValueError(f"p must be 1 or 2, got {p}")
    if reduction == "mean":
        return per_pixel.sum() * (1.0 / np.count_nonzero(m))
    j = pred.shape[0] if pred.ndim == 4 else 1
    return per_pixel.sum() * (1.0 / j)


def loss_normals(n_hat, n_gt, mask) -> T.Tensor:
    """Negative mean cosine similarity over valid pixels; -1 when identical."""
    n_hat, n_gt = T.as_tensor(n_hat), T.as_tensor(n_gt)
    if n_hat.shape != n_gt.shape:
        raise T.ShapeError(f"loss_normals: {n_hat.shape} vs {n_gt.shape}")
    pix_shape = n_hat.shape[:1] + (1,) + n_hat.shape[2:]
    m = _mask_array(mask, pix_shape)
    cos = (n_hat * n_gt).sum(axis=1, keepdims=True)
    return (cos * m.astype(np.float32)).sum() * (-1.0 / np.count_nonzero(m))


def loss_total(pred, gt, n_hat, n_gt, mask, config: Optional[LossConfig] = None) -> T.Tensor:
    cfg = config or LossConfig()
    lp = loss_lp(pred, gt, mask, cfg.p, cfg.lp_reduction)
    if cfg.lambda_n == 0:
        return lp
    return lp + loss_normals(n_hat, n_gt, mask) * cfg.lambda_n


@dataclass
class MetricsReport:
    rmse: float  # mm
    mae: float  # mm
    mre: float  # percent
    delta1: float  # percent
    delta2: float
    delta3: float
    mns: float
    count: int  # samples J
    prep_time_ms: Optional[float] = None

    def as_dict(self) -> dict:
        return asdict(self)


def metrics(
    pred,
    gt,
    mask=None,
    normals_pred: Optional[np.ndarray] = None,
    normals_gt: Optional[np.ndarray] = None,
    d_max: float = D_MAX,
) -> MetricsReport:
    """Quality metrics on metric depth in millimeters.

    ``pred`` and ``gt`` are H x W or J x H x W. Pixels with ``gt <= 0`` are
    always excluded. Normals default to the centered-difference estimate of
    each depth map on normalized depth (MNS is NaN for frames smaller than
    3x3). Statistics are pooled over all valid pixels of all samples.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"metrics: pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
        if mask is not None:
            mask = np.asarray(mask)[None]
    valid = gt > 0
    if mask is not None:
        valid &= np.broadcast_to(np.asarray(mask, dtype=bool), gt.shape)
    if not valid.any():
        raise ValueError("metrics: no valid pixels")

    p, g = pred[valid], gt[valid]
    err = p - g
    rmse = float(np.sqrt(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    mre = float(np.mean(np.abs(err) / g) * 100.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(p > 0, np.maximum(p / g, g / p), np.inf)
    deltas = [float(np.mean(ratio < 1.25**i) * 100.0) for i in (1, 2, 3)]

    if min(gt.shape[1:]) < 3 and (normals_pred is None or normals_gt is None):
        # normals need a 3x3 neighbourhood; MNS is undefined for such frames
        return MetricsReport(rmse, mae, mre, *deltas, mns=math.nan, count=gt.shape[0])
    scale = np.float32(1.0 / (d_max * 1000.0))
    if normals_pred is None:
        normals_pred = normals_array((pred * scale).astype(np.float32))
    if normals_gt is None:
        normals_gt = normals_array((gt * scale).astype(np.float32))
    npred = np.asarray(normals_pred, dtype=np.float64).reshape(gt.shape[0], 3, *gt.shape[1:])
    ngt = np.asarray(normals_gt, dtype=np.float64).reshape(gt.shape[0], 3, *gt.shape[1:])
    cos = (npred * ngt).sum(axis=1)
    mns = float(np.mean(cos[valid]))
    return MetricsReport(rmse, mae, mre, *deltas, mns=mns, count=gt.shape[0])
