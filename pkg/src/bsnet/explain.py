"""Occlusion explanations over superpixels.

Every superpixel is zeroed in turn and the change of the six-region class
distribution is painted back onto the pixels of that superpixel.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import imaging
from .losses import REGION_NAMES
from .network import BSNet, forward_full, predict_score
from .tensor import ContractError

DEFAULT_SUPERPIXELS = 200  # at 128 x 128
CLASS_COLORS = np.array([[0, 160, 0], [255, 140, 0], [220, 0, 0], [0, 0, 0]], dtype=np.float64)

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class Explanation:
    emap: np.ndarray  # (H, W, 3, 2, 4)
    p0: np.ndarray  # (3, 2, 4)
    labels: np.ndarray  # (H, W) superpixel ids
    deltas: np.ndarray  # (N, 3, 2, 4), p_i - p_0

    @property
    def prediction(self) -> np.ndarray:
        return predict_score(self.p0)


def default_superpixels(size: int) -> int:
    return max(1, int(round(DEFAULT_SUPERPIXELS * (size / 128) ** 2)))


def model_predictor(model: BSNet, mode: str = "ha") -> Predictor:
    return lambda batch: forward_full(batch, model, mode)[0]


def replicas(img: np.ndarray, labels: np.ndarray, ids) -> np.ndarray:
    out = np.repeat(img[None], len(ids), axis=0)
    for j, i in enumerate(ids):
        out[j][labels == i] = 0.0
    return out


def explanation_map(model: BSNet | Predictor, img, n_superpixels: int | None = None, mode: str = "ha",
                    labels: np.ndarray | None = None, batch: int = 16) -> Explanation:
    """E = sum_i S_i (p_i - p_0) using exactly N + 1 forward passes.

    ``model`` may be a BSNet or any callable mapping an (B, H, W) image stack
    to (B, 3, 2, 4) distributions (e.g. an ensemble).
    """
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 2:
        raise ContractError(f"explanation_map takes one (H, W) image, got {img.shape}")
    predict = model_predictor(model, mode) if isinstance(model, BSNet) else model
    if labels is None:
        labels = imaging.extract_superpixels(img, n_superpixels or default_superpixels(img.shape[0]))
    n = int(labels.max()) + 1
    p0 = np.asarray(predict(img[None]), dtype=np.float64)[0]
    deltas = np.empty((n, 3, 2, 4))
    for start in range(0, n, batch):
        ids = range(start, min(n, start + batch))
        deltas[start:start + len(ids)] = np.asarray(predict(replicas(img, labels, ids)), dtype=np.float64) - p0
    # superpixels partition the image, so each pixel receives exactly one term
    emap = deltas[labels]
    return Explanation(emap, p0, labels, deltas)


def region_index_map(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """(row, col) region of every pixel; overlapping bands go to the nearest band centre."""
    centres = np.array([0.2, 0.5, 0.8]) * h
    y = np.arange(h) + 0.5
    rows = np.argmin(np.abs(y[:, None] - centres[None]), axis=1)
    cols = (np.arange(w) + 0.5 >= w / 2).astype(np.int64)
    return np.broadcast_to(rows[:, None], (h, w)), np.broadcast_to(cols[None], (h, w))


def supportiveness(expl: Explanation, pred: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel r = p_0[k] - p_i[k] for the pixel's region and its predicted class k."""
    pred = expl.prediction if pred is None else np.asarray(pred).reshape(3, 2)
    h, w = expl.labels.shape
    rows, cols = region_index_map(h, w)
    k = pred[rows, cols]
    return -expl.emap[np.arange(h)[:, None], np.arange(w)[None], rows, cols, k]


def region_supportiveness(expl: Explanation, pred: np.ndarray | None = None) -> np.ndarray:
    """(3, 2) max over superpixels of the drop in each region's predicted-class probability."""
    pred = expl.prediction if pred is None else np.asarray(pred).reshape(3, 2)
    drops = -expl.deltas[:, np.arange(3)[:, None], np.arange(2)[None], pred]
    return drops.max(axis=0)


def render_explanation(expl: Explanation, pred, out_path) -> np.ndarray:
    """8-bit RGB overlay: supportive pixels in their class colour, opacity r / max r, white elsewhere."""
    pred = np.asarray(pred).reshape(3, 2)
    r = supportiveness(expl, pred)
    h, w = r.shape
    rows, cols = region_index_map(h, w)
    peak = r.max()
    alpha = np.where(r > 0, r / peak, 0.0) if peak > 0 else np.zeros_like(r)
    color = CLASS_COLORS[pred[rows, cols]]
    rgb = 255.0 * (1 - alpha[..., None]) + color * alpha[..., None]
    out = np.round(rgb).astype(np.uint8)
    if out_path is not None:
        imaging.write_png(out_path, out)
    return out


def write_deltas_csv(path, expl: Explanation) -> None:
    """CSV ``superpixel_id,region,class,delta`` with every p_i - p_0 value."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["superpixel_id", "region", "class", "delta"])
        for i, d in enumerate(expl.deltas):
            for reg, name in enumerate(REGION_NAMES):
                for c in range(4):
                    wr.writerow([i, name, c, repr(float(d[reg % 3, reg // 3, c]))])
