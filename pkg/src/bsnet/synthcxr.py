"""Procedural chest phantoms with known lung masks and Brixia scores.

Geometry is expressed in frame-relative units so phantoms render at any
resolution.  Column 0 of a score (regions A, B, C) is the left half of the
image; opacity for region (row, col) is confined to the lung area inside the
non-overlapping core of that row's pooling band, so the ground truth agrees
with the network's region pooling.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imaging
from .tensor import ContractError

# non-overlapping cores of the three 0.4-high bands starting at 0, 0.3, 0.6
ROW_CORES = ((0.0, 0.3), (0.4, 0.6), (0.7, 1.0))
BAND_EXTENTS = ((0.0, 0.4), (0.3, 0.7), (0.6, 1.0))
CLEAR_LUNG_THRESHOLD = 0.3
# mean brightening added per severity level (before texture modulation)
SEVERITY_GAIN = (0.0, 0.10, 0.19, 0.33)


@dataclass
class PhantomSpec:
    seed: int
    severity: np.ndarray = field(default_factory=lambda: np.zeros((3, 2), dtype=np.int64))
    size: int = 128
    center_jitter: float = 0.02
    axis_jitter: float = 0.06
    rib_count: tuple = (7, 10)
    heart_jitter: float = 0.03
    device_prob: float = 0.3

    def __post_init__(self):
        self.severity = np.asarray(self.severity, dtype=np.int64).reshape(3, 2)
        if self.severity.min() < 0 or self.severity.max() > 3:
            raise ContractError("severities must lie in {0..3}")
        if self.size < 16:
            raise ContractError("phantom size must be at least 16")


@dataclass
class SampleRecord:
    image: np.ndarray
    lung_mask: np.ndarray
    score: np.ndarray
    id: str = ""


def _ellipse(yy, xx, cy, cx, ay, ax):
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return n / (n.std() + 1e-12)


def region_masks(h: int, w: int, cores: bool = False) -> np.ndarray:
    """(3, 2, H, W) boolean frame masks for the band (or band core) x column cells."""
    yy = (np.arange(h) + 0.5) / h
    xx = (np.arange(w) + 0.5) / w
    rows = ROW_CORES if cores else BAND_EXTENTS
    out = np.zeros((3, 2, h, w), dtype=bool)
    for r, (a, b) in enumerate(rows):
        in_row = (yy >= a) & (yy < b)
        for c, (l, u) in enumerate(((0.0, 0.5), (0.5, 1.0))):
            in_col = (xx >= l) & (xx < u)
            out[r, c] = in_row[:, None] & in_col[None, :]
    return out


def gen_phantom(spec: PhantomSpec) -> SampleRecord:
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s]
    yy = (yy + 0.5) / s
    xx = (xx + 0.5) / s
    j = spec.center_jitter

    # body and background
    img = np.full((s, s), 0.08)
    body = _ellipse(yy, xx, 0.55 + rng.uniform(-j, j), 0.5 + rng.uniform(-j, j), 0.62, 0.47 + rng.uniform(-j, j))
    img[body] = 0.55
    # lungs: left-of-image lung is column 0
    lungs = np.zeros((s, s), dtype=bool)
    for cx0 in (0.28, 0.72):
        cy = 0.5 + rng.uniform(-j, j)
        cx = cx0 + rng.uniform(-j, j)
        ay = 0.42 * (1 + rng.uniform(-spec.axis_jitter, spec.axis_jitter))
        ax = 0.17 * (1 + rng.uniform(-spec.axis_jitter, spec.axis_jitter))
        lungs |= _ellipse(yy, xx, cy, cx, ay, ax)
    img[lungs] = 0.16
    # rib shadows: soft horizontal arcs
    n_ribs = rng.integers(spec.rib_count[0], spec.rib_count[1] + 1)
    phase = rng.uniform(0, 2 * np.pi)
    ribs = 0.5 + 0.5 * np.cos(2 * np.pi * n_ribs * (yy + 0.15 * (xx - 0.5) ** 2) + phase)
    img += 0.05 * ribs ** 4 * body
    # heart shadow, partly overlapping the image-right lung
    hj = spec.heart_jitter
    heart = _ellipse(yy, xx, 0.66 + rng.uniform(-hj, hj), 0.54 + rng.uniform(-hj, hj), 0.15, 0.12)
    img[heart] += 0.18
    img += 0.02 * _smooth_noise(rng, (s, s), s / 12)

    # opacities draw from their own stream so anatomy, devices and noise do not
    # depend on the severity grid
    orng = np.random.default_rng([spec.seed, 1])
    cores = region_masks(s, s, cores=True)
    fine = _smooth_noise(orng, (s, s), max(s / 128, 0.6))
    for r in range(3):
        for c in range(2):
            sev = int(spec.severity[r, c])
            if sev == 0:
                continue
            area = cores[r, c] & lungs
            gain = SEVERITY_GAIN[sev] * (1 + orng.uniform(-0.15, 0.15))
            layer = np.zeros((s, s))
            # interstitial texture at every positive level
            layer += 0.6 * gain * (1 + fine)
            if sev >= 2:
                blobs = np.zeros((s, s))
                ys, xs = np.nonzero(area)
                n_blobs = 3 if sev == 2 else 6
                if ys.size:
                    pick = orng.integers(0, ys.size, n_blobs)
                    blobs[ys[pick], xs[pick]] = 1.0
                    blobs = ndimage.gaussian_filter(blobs, s * (0.05 if sev == 2 else 0.07))
                    blobs /= blobs.max() + 1e-12
                layer += gain * (1.2 * blobs)
            if sev == 3:
                layer += 0.45 * gain * (1 + 0.3 * _smooth_noise(orng, (s, s), s / 20))
            img += np.clip(layer, 0, None) * area

    # devices: tube lines and lead disks
    if rng.uniform() < spec.device_prob:
        t = np.linspace(0, 1, 4 * s)
        x0, x1 = rng.uniform(0.3, 0.7, 2)
        bend = rng.uniform(-0.1, 0.1)
        px = np.clip(((x0 + (x1 - x0) * t + bend * np.sin(np.pi * t)) * s).astype(int), 0, s - 1)
        py = np.clip((t * 0.8 * s).astype(int), 0, s - 1)
        tube = np.zeros((s, s))
        tube[py, px] = 1.0
        img += 0.35 * np.clip(ndimage.gaussian_filter(tube, max(s / 200, 0.5)) * 3, 0, 1)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0.1, 0.9, 2)
            img[_ellipse(yy, xx, cy, cx, 0.02, 0.02)] += 0.3

    img += 0.01 * rng.standard_normal((s, s))
    img = np.clip(img, 0, 1).astype(np.float32)
    return SampleRecord(image=img, lung_mask=lungs.astype(np.float32), score=spec.severity.copy(), id=f"phantom_{spec.seed}")


def region_mean_intensity(sample: SampleRecord) -> np.ndarray:
    """(3, 2) mean image intensity over lung pixels of each region band."""
    h, w = sample.image.shape
    bands = region_masks(h, w)
    lung = sample.lung_mask > 0.5
    out = np.zeros((3, 2))
    for r in range(3):
        for c in range(2):
            sel = bands[r, c] & lung
            out[r, c] = sample.image[sel].mean() if sel.any() else 0.0
    return out


# -- misalignment pairs ------------------------------------------------------------

@dataclass(frozen=True)
class MisalignConfig:
    max_rotation_deg: float = 25.0
    max_scale: float = 0.10
    max_shift: float = 0.10
    prob: float = 0.8


def draw_misalignment(rng_seed: int, cfg: MisalignConfig = MisalignConfig()) -> np.ndarray:
    rng = np.random.default_rng(rng_seed)
    u = rng.uniform(size=3)
    rot = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    scale = 1 + rng.uniform(-cfg.max_scale, cfg.max_scale)
    shift = rng.uniform(-cfg.max_shift, cfg.max_shift, 2)
    return imaging.affine_params(
        rot if u[0] < cfg.prob else 0.0,
        scale if u[1] < cfg.prob else 1.0,
        shift if u[2] < cfg.prob else (0.0, 0.0),
    )


def gen_misaligned_pair(sample: SampleRecord, rng_seed: int, cfg: MisalignConfig = MisalignConfig(), params=None):
    """(warped image, warped mask, original mask, true params).

    The true params map warped-frame coordinates to original-frame coordinates;
    they are diagnostic only; alignment training never sees them.
    """
    if params is None:
        params = draw_misalignment(rng_seed, cfg)
    params = np.asarray(params, dtype=np.float64)
    if np.allclose(params, [1, 0, 0, 0, 1, 0]):
        return sample.image.copy(), sample.lung_mask.copy(), sample.lung_mask.copy(), params
    img = imaging.warp_affine(sample.image, params).astype(np.float32)
    mask = np.clip(imaging.warp_affine(sample.lung_mask, params), 0, 1).astype(np.float32)
    return img, mask, sample.lung_mask.copy(), params


# -- datasets ----------------------------------------------------------------------

def _item_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def draw_severity(rng) -> np.ndarray:
    """Patient-level latent severity -> per-region binomial scores (mid-range mode)."""
    p = rng.beta(2.0, 2.2)
    return rng.binomial(3, p, size=(3, 2)).astype(np.int64)


def make_samples(n: int, seed: int, size: int = 128, start: int = 0) -> list[SampleRecord]:
    out = []
    for i in range(start, start + n):
        s = _item_seed(seed, i)
        sev = draw_severity(np.random.default_rng(s))
        rec = gen_phantom(PhantomSpec(seed=s, severity=sev, size=size))
        rec.id = f"cxr_{i:05d}"
        out.append(rec)
    return out


def split_counts(n: int, split) -> tuple[int, int, int]:
    split = tuple(float(f) for f in split)
    if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1) > 1e-9:
        raise ContractError(f"split fractions must be three non-negative values summing to 1, got {split}")
    n_train = int(round(n * split[0]))
    n_val = int(round(n * split[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def gen_dataset(n: int, seed: int, out_dir, split=(0.8, 0.1, 0.1), size: int = 128) -> dict[str, list[str]]:
    """Write a phantom dataset to ``out_dir``; returns the split id lists."""
    counts = split_counts(n, split)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise OSError(f"{out} is not writable")
    samples = make_samples(n, seed, size)
    with open(out / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "A", "B", "C", "D", "E", "F"])
        for rec in samples:
            imaging.write_pgm(out / "images" / f"{rec.id}.pgm", rec.image, bits=16)
            imaging.write_pgm(out / "masks" / f"{rec.id}.pgm", rec.lung_mask, bits=8)
            wr.writerow([rec.id, *score_to_row(rec.score)])
    order = np.random.default_rng(seed).permutation(n)
    ids = [samples[i].id for i in order]
    splits = {"train": sorted(ids[:counts[0]]), "val": sorted(ids[counts[0]:counts[0] + counts[1]]), "test": sorted(ids[counts[0] + counts[1]:])}
    for name, lst in splits.items():
        (out / f"{name}.txt").write_text("".join(f"{i}\n" for i in lst), encoding="utf-8")
    return splits


def score_to_row(score) -> list[int]:
    """3x2 grid -> [A, B, C, D, E, F]."""
    s = np.asarray(score).reshape(3, 2)
    return [int(v) for v in np.concatenate([s[:, 0], s[:, 1]])]


def row_to_score(row) -> np.ndarray:
    v = np.asarray([int(x) for x in row], dtype=np.int64)
    return np.stack([v[:3], v[3:]], axis=1)


def read_scores(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != ["id", "A", "B", "C", "D", "E", "F"]:
            raise ValueError(f"{path}: unexpected header {header}")
        return {row[0]: row_to_score(row[1:]) for row in rd}


def load_split(data_dir, split: str) -> list[SampleRecord]:
    d = Path(data_dir)
    ids = [line for line in (d / f"{split}.txt").read_text(encoding="utf-8").splitlines() if line]
    scores = read_scores(d / "scores.csv")
    return [
        SampleRecord(
            image=imaging.read_pgm(d / "images" / f"{i}.pgm"),
            lung_mask=(imaging.read_pgm(d / "masks" / f"{i}.pgm") > 0.5).astype(np.float32),
            score=scores[i],
            id=i,
        )
        for i in ids
    ]
