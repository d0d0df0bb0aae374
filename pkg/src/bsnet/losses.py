"""Training losses and evaluation statistics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .tensor import ContractError, DimensionError, Tensor, as_tensor

REGION_NAMES = ("A", "B", "C", "D", "E", "F")
PROB_FLOOR = 1e-12
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.7
    beta: float = 10.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta <= 0:
            raise ContractError(f"beta must be positive, got {self.beta}")


# -- segmentation ------------------------------------------------------------------

def dice_loss(pred, target) -> Tensor:
    """1 - (2|P.T| + 1) / (|P| + |T| + 1), averaged over the batch axis."""
    pred = as_tensor(pred)
    target = as_tensor(np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise DimensionError(f"dice_loss: {pred.shape} vs {target.shape}")
    if pred.ndim <= 2:
        pred = F.reshape(pred, (1, -1))
        target = F.reshape(target, (1, -1))
    n = pred.shape[0]
    p = F.reshape(pred, (n, -1))
    t = F.reshape(target, (n, -1))
    inter = F.sum(p * t, axis=1)
    denom = F.sum(p, axis=1) + F.sum(t, axis=1) + DICE_SMOOTH
    return F.mean(1.0 - (2.0 * inter + DICE_SMOOTH) / denom)


def overlap_metrics(pred, target, threshold: float = 0.5) -> tuple[float, float]:
    """(Dice, IoU) of the thresholded prediction against a binary target."""
    p = np.asarray(pred) > threshold
    t = np.asarray(target) > 0.5
    if p.shape != t.shape:
        raise DimensionError(f"overlap_metrics: {p.shape} vs {t.shape}")
    inter = np.logical_and(p, t).sum()
    total = p.sum() + t.sum()
    union = np.logical_or(p, t).sum()
    if total == 0:
        return 1.0, 1.0
    return float(2 * inter / total), float(inter / union)


# -- scoring -----------------------------------------------------------------------

def _onehot(y, dtype) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.min() < 0 or y.max() > 3:
        raise ContractError("scores must lie in {0..3}")
    return np.eye(4, dtype=dtype)[y]


def _as_dist(dist) -> Tensor:
    dist = as_tensor(dist)
    if dist.shape[-3:] != (3, 2, 4):
        raise DimensionError(f"expected (..., 3, 2, 4) distribution, got {dist.shape}")
    return dist


def scce(dist, y) -> Tensor:
    """Mean over regions of -log p(true class), with p floored at 1e-12."""
    dist = _as_dist(dist)
    picked = F.sum(dist * _onehot(y, dist.dtype), axis=-1)
    return F.mean(-F.log(F.clamp_min(picked, PROB_FLOOR)))


def expected_class(dist, beta: float) -> Tensor:
    dist = _as_dist(dist)
    w = F.softmax(dist * beta, axis=-1)
    return F.sum(w * np.arange(4, dtype=dist.dtype), axis=-1)


def mae_d(dist, y, beta: float = 10.0) -> Tensor:
    """Differentiable MAE: |y - sum_c c softmax(beta * p)_c| averaged over regions."""
    if beta <= 0:
        raise ContractError("beta must be positive")
    e = expected_class(dist, beta)
    return F.mean(F.absolute(e - np.asarray(y, dtype=e.dtype)))


def composite_loss(dist, y, cfg: LossConfig = LossConfig()) -> Tensor:
    return scce(dist, y) * cfg.alpha + mae_d(dist, y, cfg.beta) * (1 - cfg.alpha)


# -- evaluation statistics ------------------------------------------------------------

@dataclass(frozen=True)
class ErrorStats:
    mer: float
    mae: float
    sd: float
    cc: float | None
    scope: str
    region: str = ""

    def row(self) -> list[str]:
        cc = "NA" if self.cc is None else f"{self.cc:.6f}"
        return [self.scope, self.region, f"{self.mer:.6f}", f"{self.mae:.6f}", f"{self.sd:.6f}", cc]


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    da, db = a - a.mean(), b - b.mean()
    den = np.sqrt((da * da).sum() * (db * db).sum())
    if den == 0:
        return None
    return float(np.clip((da * db).sum() / den, -1, 1))


def _stats(pred: np.ndarray, ref: np.ndarray, scope: str, region: str = "") -> ErrorStats:
    err = pred.astype(np.float64) - ref.astype(np.float64)
    ae = np.abs(err)
    return ErrorStats(float(err.mean()), float(ae.mean()), float(ae.std()), _pearson(pred, ref), scope, region)


def error_stats(preds, refs, scope: str = "average"):
    """Error statistics over score lists.

    ``scope`` is ``"region"`` (list of six per-region stats, A..F),
    ``"average"`` (per-region values averaged) or ``"global"`` (Global Scores).
    """
    p = np.asarray(preds, dtype=np.int64).reshape(-1, 3, 2)
    r = np.asarray(refs, dtype=np.int64).reshape(-1, 3, 2)
    if p.shape != r.shape:
        raise DimensionError(f"error_stats: {len(p)} predictions vs {len(r)} references")
    if len(p) < 2:
        raise ContractError("error_stats needs at least two items")
    if scope == "global":
        return _stats(p.sum(axis=(1, 2)), r.sum(axis=(1, 2)), "global")
    per = [_stats(p[:, i % 3, i // 3], r[:, i % 3, i // 3], "region", name) for i, name in enumerate(REGION_NAMES)]
    if scope == "region":
        return per
    if scope == "average":
        ccs = [s.cc for s in per if s.cc is not None]
        return ErrorStats(
            float(np.mean([s.mer for s in per])),
            float(np.mean([s.mae for s in per])),
            float(np.mean([s.sd for s in per])),
            float(np.mean(ccs)) if ccs else None,
            "average",
        )
    raise ContractError(f"unknown scope {scope!r}")


def confusion_matrix(preds, refs, domain_size: int) -> np.ndarray:
    """Counts with rows = reference value, columns = predicted value."""
    p = np.asarray(preds, dtype=np.int64).ravel()
    r = np.asarray(refs, dtype=np.int64).ravel()
    if p.shape != r.shape:
        raise DimensionError("confusion_matrix: length mismatch")
    for v in (p, r):
        if v.size and (v.min() < 0 or v.max() >= domain_size):
            raise ContractError(f"value outside [0, {domain_size})")
    m = np.zeros((domain_size, domain_size), dtype=np.int64)
    np.add.at(m, (r, p), 1)
    return m


def write_stats_csv(path, stats: Sequence[ErrorStats], label: str | None = None) -> None:
    header = ["scope", "region", "MEr", "MAE", "SD", "CC"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow((["model"] if label is not None else []) + header)
        for s in stats:
            wr.writerow(([label] if label is not None else []) + s.row())


def region_mae(preds, refs) -> float:
    return float(np.mean(np.abs(np.asarray(preds, dtype=np.float64) - np.asarray(refs, dtype=np.float64))))
