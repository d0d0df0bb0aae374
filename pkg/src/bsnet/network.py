"""Segment, align and score: the multi-network severity model.

Pipeline for an (N, 1, H, W) image batch::

    backbone -> 4 feature levels (strides 2, 4, 8, 16)
    nested decoder -> lung probability mask
    alignment regressor(mask) -> 6-value affine per image
    every level resampled with the same affine (optionally masked)
    fixed 3x2 region pooling -> shared FPN head -> (N, 3, 2, 4) softmax
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import Conv2d, Dense, GroupNorm, Module
from .tensor import ContractError, Tensor, as_tensor, no_grad

IDENTITY_AFFINE = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
ROI_GRID = 4
BAND_FRACTION = 0.4
BAND_STARTS = (0.0, 0.3, 0.6)
ALIGN_INPUT = 64
MIN_DETERMINANT = 1e-3


class AttentionMode(enum.Enum):
    HARD = "ha"
    SOFT = "sa"

    @classmethod
    def parse(cls, value) -> "AttentionMode":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


@dataclass
class ModelConfig:
    input_size: int = 128
    widths: tuple = (16, 32, 48, 64)
    head_width: int = 32
    seed: int = 0

    def to_dict(self) -> dict:
        return {"input_size": self.input_size, "widths": list(self.widths), "head_width": self.head_width, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(input_size=int(d["input_size"]), widths=tuple(d["widths"]), head_width=int(d["head_width"]), seed=int(d["seed"]))


# -- blocks ----------------------------------------------------------------------

class ResBlock(Module):
    def __init__(self, rng, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride)
        self.norm1 = GroupNorm(c_out)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, 1, gain=0.5)
        self.norm2 = GroupNorm(c_out)
        self.shortcut = Conv2d(rng, c_in, c_out, 1, stride) if (stride != 1 or c_in != c_out) else None

    def forward(self, x):
        h = self.norm2(self.conv2(F.relu(self.norm1(self.conv1(x)))))
        s = self.shortcut(x) if self.shortcut is not None else x
        return F.relu(h + s)


class Backbone(Module):
    def __init__(self, rng, widths):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.stem = Conv2d(rng, 1, w0, 3, 2)
        self.stem_norm = GroupNorm(w0)
        self.stages = [
            _Stage(rng, w0, w0, 1),
            _Stage(rng, w0, w1, 2),
            _Stage(rng, w1, w2, 2),
            _Stage(rng, w2, w3, 2),
        ]

    def forward(self, x):
        h = F.relu(self.stem_norm(self.stem(x)))
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats


class _Stage(Module):
    def __init__(self, rng, c_in, c_out, stride):
        super().__init__()
        self.blocks = [ResBlock(rng, c_in, c_out, stride), ResBlock(rng, c_out, c_out, 1)]

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class NestedDecoder(Module):
    """Nested skip decoder with at most two intermediate nodes per level.

    Node (i, j) fuses every earlier node on level i with the upsampled node
    (i + 1, j - 1).  Output logits come from node (0, 2) at stride 2.
    """

    def __init__(self, rng, widths, cap=32):
        super().__init__()
        w0, w1, w2, w3 = widths
        d0, d1, d2 = (min(w, cap) for w in (w0, w1, w2))
        self.x21 = Conv2d(rng, w2 + w3, d2)
        self.x11 = Conv2d(rng, w1 + w2, d1)
        self.x12 = Conv2d(rng, w1 + d1 + d2, d1)
        self.x01 = Conv2d(rng, w0 + w1, d0)
        self.x02 = Conv2d(rng, w0 + d0 + d1, d0)
        self.out = Conv2d(rng, d0, 2, 1, zero=True)

    def forward(self, feats):
        x00, x10, x20, x30 = feats
        up = F.upsample2x
        x21 = F.relu(self.x21(F.concat([x20, up(x30)])))
        x11 = F.relu(self.x11(F.concat([x10, up(x20)])))
        x12 = F.relu(self.x12(F.concat([x10, x11, up(x21)])))
        x01 = F.relu(self.x01(F.concat([x00, up(x10)])))
        x02 = F.relu(self.x02(F.concat([x00, x01, up(x12)])))
        logits = up(self.out(x02))
        probs = F.softmax(logits, axis=1)
        return probs[:, 1:2]


class AlignmentRegressor(Module):
    """Lung mask -> 6 affine parameters; untrained output is exactly identity."""

    def __init__(self, rng):
        super().__init__()
        self.convs = [Conv2d(rng, 1, 8, 3, 2), Conv2d(rng, 8, 16, 3, 2), Conv2d(rng, 16, 32, 3, 2), Conv2d(rng, 32, 32, 3, 2)]
        self.fc = Dense(rng, 32 * 4 * 4, 64)
        self.theta = Dense(rng, 64, 6, zero=True)
        self.theta.bias.data[:] = IDENTITY_AFFINE

    def forward(self, mask):
        h = F.resize(mask, ALIGN_INPUT, ALIGN_INPUT)
        for conv in self.convs:
            h = F.swish(conv(h))
        h = F.swish(self.fc(F.reshape(h, (h.shape[0], -1))))
        return self.theta(h)


class ScoringHead(Module):
    """FPN merge of the four pooled levels followed by a shared conv head."""

    def __init__(self, rng, widths, width):
        super().__init__()
        self.lateral = [Conv2d(rng, c, width, 1) for c in widths]
        self.smooth = Conv2d(rng, width, width, 3)
        self.fuse = Conv2d(rng, 4 * width, width, 3)
        self.classify = Conv2d(rng, width, 4, 1)

    def forward(self, regions):
        lat = [l(r) for l, r in zip(self.lateral, regions)]
        merged = [None] * 4
        merged[3] = lat[3]
        for lvl in (2, 1, 0):
            # pooled maps share one spatial size, so the top-down path is a plain add
            merged[lvl] = lat[lvl] + F.resize(merged[lvl + 1], *lat[lvl].shape[-2:])
        smoothed = [F.swish(self.smooth(m)) for m in merged]
        h = F.swish(self.fuse(F.concat(smoothed)))
        logits = F.global_avg_pool(self.classify(h))
        return F.softmax(logits, axis=1)


# -- geometry --------------------------------------------------------------------

def band_bounds(h: float) -> list[tuple[float, float]]:
    """Three vertical bands of height 0.4h starting at 0, 0.3h, 0.6h."""
    return [(s * h, (s + BAND_FRACTION) * h) for s in BAND_STARTS]


def column_bounds(w: float) -> list[tuple[float, float]]:
    return [(0.0, w / 2), (w / 2, float(w))]


def _pool_operator(n: int, lo: float, hi: float, bins: int = ROI_GRID) -> np.ndarray:
    """(bins, n) matrix averaging [lo, hi) into equal bins, weighting by overlap."""
    edges = np.linspace(lo, hi, bins + 1)
    px = np.arange(n)
    op = np.zeros((bins, n))
    for b in range(bins):
        overlap = np.clip(np.minimum(edges[b + 1], px + 1) - np.maximum(edges[b], px), 0, None)
        op[b] = overlap / overlap.sum()
    return op


def roi_operators(h: int, w: int):
    rows = np.concatenate([_pool_operator(h, a, b) for a, b in band_bounds(h)])
    cols = np.concatenate([_pool_operator(w, a, b) for a, b in column_bounds(w)])
    return rows, cols


def roi_pool(feats) -> list[Tensor]:
    """Per level (N, C, H, W) -> (N*6, C, 4, 4), region index = row*2 + col."""
    out = []
    for f in feats:
        f = as_tensor(f)
        n, c, h, w = f.shape
        rows, cols = roi_operators(h, w)
        pooled = F.resample_separable(f, rows, cols)  # (N, C, 12, 8)
        pooled = F.reshape(pooled, (n, c, 3, ROI_GRID, 2, ROI_GRID))
        pooled = F.transpose(pooled, (0, 2, 4, 1, 3, 5))
        out.append(F.reshape(pooled, (n * 6, c, ROI_GRID, ROI_GRID)))
    return out


def sanitize_affine(theta: np.ndarray, mask: np.ndarray | None = None):
    """Return (keep, flags): rows to keep and a reason string per substituted row."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 6)
    det = theta[:, 0] * theta[:, 4] - theta[:, 1] * theta[:, 3]
    keep = np.all(np.isfinite(theta), axis=1) & (np.abs(det) >= MIN_DETERMINANT)
    flags = ["" if k else "singular" for k in keep]
    if mask is not None:
        mass = np.asarray(mask, dtype=np.float64).reshape(theta.shape[0], -1).sum(axis=1)
        for i in np.nonzero(mass <= 1e-6)[0]:
            keep[i] = False
            flags[i] = "empty_mask"
    return keep, flags


def align_features(feats, mask, theta, mode) -> tuple[list[Tensor], Tensor]:
    """Resample every level (and the mask) with ``theta``; mask levels under HARD attention."""
    mode = AttentionMode.parse(mode)
    mask = as_tensor(mask)
    theta = as_tensor(theta)
    h, w = mask.shape[-2:]
    aligned_mask = F.grid_sample(mask, F.affine_grid(theta, h, w))
    out = []
    for f in feats:
        f = as_tensor(f)
        fh, fw = f.shape[-2:]
        a = F.grid_sample(f, F.affine_grid(theta, fh, fw))
        if mode is AttentionMode.HARD:
            a = a * F.resize(aligned_mask, fh, fw)
        out.append(a)
    return out, aligned_mask


# -- the model -------------------------------------------------------------------

class BSNet(Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        rng = np.random.default_rng(self.config.seed)
        widths = self.config.widths
        self.backbone = Backbone(rng, widths)
        self.decoder = NestedDecoder(rng, widths)
        self.aligner = AlignmentRegressor(rng)
        self.head = ScoringHead(rng, widths, self.config.head_width)

    def groups(self) -> dict[str, list[Tensor]]:
        return {
            "backbone": self.backbone.parameters(),
            "segmentation": self.decoder.parameters(),
            "alignment": self.aligner.parameters(),
            "scoring": self.head.parameters(),
        }

    def check_input(self, x: Tensor) -> None:
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (s, s):
            raise ContractError(f"expected input (N, 1, {s}, {s}), got {x.shape}")

    def segment(self, x):
        x = as_tensor(x)
        self.check_input(x)
        feats = self.backbone(x)
        return self.decoder(feats), feats

    def estimate_affine(self, mask, sanitize: bool = True):
        """Returns (theta (N, 6) Tensor, flags)."""
        theta = self.aligner(mask)
        if not sanitize:
            return theta, [""] * theta.shape[0]
        keep, flags = sanitize_affine(theta.data, as_tensor(mask).data)
        if keep.all():
            return theta, flags
        k = keep.astype(theta.dtype)[:, None]
        ident = np.broadcast_to(IDENTITY_AFFINE.astype(theta.dtype), theta.shape) * (1 - k)
        if not np.all(np.isfinite(theta.data)):
            theta = Tensor(np.nan_to_num(theta.data, nan=0.0, posinf=0.0, neginf=0.0))
        return theta * k + ident, flags

    def score(self, regions):
        probs = self.head(regions)
        return F.reshape(probs, (probs.shape[0] // 6, 3, 2, 4))

    def forward(self, x, mode="ha", use_alignment: bool = True):
        mode = AttentionMode.parse(mode)
        mask, feats = self.segment(x)
        if use_alignment:
            theta, flags = self.estimate_affine(mask)
        else:
            n = mask.shape[0]
            theta = Tensor(np.tile(IDENTITY_AFFINE, (n, 1)).astype(mask.dtype))
            flags = [""] * n
        aligned, aligned_mask = align_features(feats, mask, theta, mode)
        dist = self.score(roi_pool(aligned))
        return {"dist": dist, "mask": mask, "theta": theta, "flags": flags, "aligned_mask": aligned_mask}


# -- numpy-level convenience ------------------------------------------------------

def _batch(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float32)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[:, None]
    return a


def predict_mask(img, model: BSNet) -> np.ndarray:
    with no_grad():
        mask, _ = model.segment(_batch(img))
    out = mask.data[:, 0]
    return out[0] if np.ndim(img) == 2 else out


def estimate_affine(mask, model: BSNet):
    """(params (6,) or (N, 6), flags) for a lung mask or a batch of masks."""
    with no_grad():
        theta, flags = model.estimate_affine(Tensor(_batch(mask)))
    params = theta.data.astype(np.float64)
    return (params[0], flags[0]) if np.ndim(mask) == 2 else (params, flags)


def forward_full(img, model: BSNet, mode="ha", use_alignment: bool = True):
    """(ScoreDistribution, ProbMask, AffineParams) for one image or a batch."""
    with no_grad():
        out = model.forward(_batch(img), mode, use_alignment)
    dist = out["dist"].data.astype(np.float64)
    mask = out["mask"].data[:, 0]
    theta = out["theta"].data.astype(np.float64)
    if np.ndim(img) == 2:
        return dist[0], mask[0], theta[0]
    return dist, mask, theta


def ensemble(dists) -> np.ndarray:
    dists = [np.asarray(d, dtype=np.float64) for d in dists]
    if not dists:
        raise ContractError("ensemble needs at least one distribution")
    return np.mean(np.stack(dists), axis=0)


def predict_score(dist) -> np.ndarray:
    """Per-region argmax; np.argmax already resolves ties to the lowest class."""
    return np.argmax(np.asarray(dist), axis=-1).astype(np.int64)
