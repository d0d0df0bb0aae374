"""CXR appearance normalisation, augmentation, superpixels and image IO."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import exposure

from . import functional as F
from .scoring import flip_score
from .tensor import ContractError, Tensor, no_grad

CLAHE_TILES = 8
CLAHE_BINS = 256
MIN_TILE = 8  # tiles narrower than this make CLAHE degenerate on small images
# distortion magnitudes are stated for a 512-pixel frame and scaled to the actual size
REFERENCE_SIZE = 512


# -- normalisation ---------------------------------------------------------------

def percentile_clip(img: np.ndarray, lo: float = 2.0, hi: float = 98.0) -> np.ndarray:
    a, b = np.percentile(img, [lo, hi])
    return np.clip(img, a, b)


def rescale01(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return img.astype(np.float32)
    return ((img - lo) / (hi - lo)).astype(np.float32)


def normalize_cxr(img: np.ndarray) -> np.ndarray:
    """CLAHE (clip 0.01), 3x3 median, 2/98 percentile clip, rescale to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise ContractError("normalize_cxr: empty image")
    if np.ptp(img) == 0:
        return img.astype(np.float32)
    h, w = img.shape
    eq = exposure.equalize_adapthist(
        rescale01(img).astype(np.float64),
        kernel_size=(max(h // CLAHE_TILES, min(h, MIN_TILE)), max(w // CLAHE_TILES, min(w, MIN_TILE))),
        clip_limit=0.01,
        nbins=CLAHE_BINS,
    )
    med = ndimage.median_filter(eq, size=3, mode="reflect")
    return rescale01(percentile_clip(med))


# -- geometric sampling ----------------------------------------------------------

def affine_params(rotation_deg: float = 0.0, scale: float = 1.0, shift=(0.0, 0.0)) -> np.ndarray:
    """Sampling affine (output -> source coords, normalised units).

    ``scale`` > 1 zooms out (content shrinks); ``shift`` is a fraction of the
    image size.
    """
    t = np.deg2rad(rotation_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([scale * c, -scale * s, 2 * shift[0], scale * s, scale * c, 2 * shift[1]])


def invert_affine(params) -> np.ndarray:
    m = np.vstack([np.asarray(params, dtype=np.float64).reshape(2, 3), [0, 0, 1]])
    return np.linalg.inv(m)[:2].reshape(6)


def compose_affine(first, second) -> np.ndarray:
    """Sampling params equivalent to warping with ``first`` and then ``second``."""
    a = np.vstack([np.asarray(first, dtype=np.float64).reshape(2, 3), [0, 0, 1]])
    b = np.vstack([np.asarray(second, dtype=np.float64).reshape(2, 3), [0, 0, 1]])
    return (a @ b)[:2].reshape(6)


def sample_grid(img: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Bilinear sampling of a 2-D image at normalised (x, y) coords (H, W, 2)."""
    with no_grad():
        out = F.grid_sample(Tensor(img[None, None].astype(np.float64)), Tensor(grid[None].astype(np.float64)))
    return out.data[0, 0]


def identity_grid(h: int, w: int) -> np.ndarray:
    ys, xs = np.meshgrid(F.normalized_coords(h), F.normalized_coords(w), indexing="ij")
    return np.stack([xs, ys], axis=-1)


def warp_affine(img: np.ndarray, params) -> np.ndarray:
    h, w = img.shape
    with no_grad():
        grid = F.affine_grid(Tensor(np.asarray(params, dtype=np.float64).reshape(1, 6)), h, w).data[0]
    return sample_grid(img, grid).astype(img.dtype if img.dtype in (np.float32, np.float64) else np.float32)


def elastic_grid(rng, h, w, alpha, sigma) -> np.ndarray:
    """Smoothed uniform displacement field; alpha and sigma in reference pixels."""
    k = w / REFERENCE_SIZE
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma * k, mode="constant") * alpha * k
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma * k, mode="constant") * alpha * k
    g = identity_grid(h, w)
    g[..., 0] += 2 * dx / w
    g[..., 1] += 2 * dy / h
    return g


def _piecewise_axis(rng, n, steps, limit) -> np.ndarray:
    """Source coordinate per output pixel for a randomly stretched cell grid."""
    knots_out = np.linspace(-1, 1, steps + 1)
    cells = 1 + rng.uniform(-limit, limit, steps)
    knots_src = np.concatenate([[0], np.cumsum(cells)])
    knots_src = knots_src / knots_src[-1] * 2 - 1
    return np.interp(F.normalized_coords(n), knots_out, knots_src)


def grid_distortion_grid(rng, h, w, steps, limit) -> np.ndarray:
    xs = _piecewise_axis(rng, w, steps, limit)
    ys = _piecewise_axis(rng, h, steps, limit)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx, yy], axis=-1)


def optical_grid(rng, h, w, distort, shift) -> np.ndarray:
    """Radial (barrel/pincushion) distortion about a jittered centre."""
    k = rng.uniform(-distort, distort)
    cx, cy = rng.uniform(-shift, shift, 2) * 2
    g = identity_grid(h, w)
    dx, dy = g[..., 0] - cx, g[..., 1] - cy
    r2 = dx * dx + dy * dy
    g[..., 0] = cx + dx * (1 + k * r2)
    g[..., 1] = cy + dy * (1 + k * r2)
    return g


# -- augmentation ----------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_deg: float = 25.0
    max_scale: float = 0.10
    max_shift: float = 0.10
    geometric_prob: float = 0.8
    elastic_alpha: float = 60.0
    elastic_sigma: float = 12.0
    grid_steps: int = 5
    grid_limit: float = 0.3
    optical_distort: float = 0.2
    optical_shift: float = 0.05
    distortion_prob: float = 0.2
    hflip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    photometric_prob: float = 0.5

    def __post_init__(self):
        for name in ("geometric_prob", "distortion_prob", "hflip_prob", "photometric_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ContractError(f"{name} must lie in [0, 1]")
        for name in ("max_rotation_deg", "max_scale", "max_shift", "elastic_alpha", "elastic_sigma",
                     "grid_limit", "optical_distort", "optical_shift", "brightness", "contrast"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(geometric_prob=0.0, distortion_prob=0.0, hflip_prob=0.0, photometric_prob=0.0)

    @classmethod
    def policy(cls, name: str) -> "AugmentConfig":
        """Named policies used by the augmentation ablation."""
        base = cls()
        if name == "none":
            return cls.disabled()
        if name == "photometric":
            return replace(base, geometric_prob=0.0, distortion_prob=0.0, hflip_prob=0.0)
        if name == "geometric":
            return replace(base, photometric_prob=0.0)
        if name == "all":
            return base
        raise ContractError(f"unknown augmentation policy {name!r}")


def augment(img, mask=None, score=None, cfg: AugmentConfig = AugmentConfig(), rng_seed: int = 0):
    """Apply one random draw of the augmentation suite.

    The same geometry is applied to ``img`` and ``mask``; a horizontal flip
    also swaps the score columns.  Returns ``(img, mask, score)``.
    """
    rng = np.random.default_rng(rng_seed)
    img = np.asarray(img, dtype=np.float32)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float32)
        if mask.shape != img.shape:
            raise ContractError(f"mask shape {mask.shape} != image shape {img.shape}")
    score = None if score is None else np.asarray(score)
    h, w = img.shape
    # draws happen unconditionally so the stream layout is seed-stable
    u = rng.uniform(size=8)

    def warp(grid):
        nonlocal img, mask
        img = sample_grid(img, grid).astype(np.float32)
        if mask is not None:
            mask = np.clip(sample_grid(mask, grid), 0, 1).astype(np.float32)

    if u[0] < cfg.hflip_prob:
        img = img[:, ::-1].copy()
        mask = None if mask is None else mask[:, ::-1].copy()
        score = None if score is None else flip_score(score)

    rot = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    scale = 1 + rng.uniform(-cfg.max_scale, cfg.max_scale)
    shift = rng.uniform(-cfg.max_shift, cfg.max_shift, 2)
    if u[1] < cfg.geometric_prob or u[2] < cfg.geometric_prob or u[3] < cfg.geometric_prob:
        params = affine_params(
            rot if u[1] < cfg.geometric_prob else 0.0,
            scale if u[2] < cfg.geometric_prob else 1.0,
            shift if u[3] < cfg.geometric_prob else (0.0, 0.0),
        )
        with no_grad():
            grid = F.affine_grid(Tensor(params.reshape(1, 6)), h, w).data[0]
        warp(grid)

    sub = np.random.default_rng(rng.integers(2**63))
    if u[4] < cfg.distortion_prob:
        warp(elastic_grid(sub, h, w, cfg.elastic_alpha, cfg.elastic_sigma))
    if u[5] < cfg.distortion_prob:
        warp(grid_distortion_grid(sub, h, w, cfg.grid_steps, cfg.grid_limit))
    if u[6] < cfg.distortion_prob:
        warp(optical_grid(sub, h, w, cfg.optical_distort, cfg.optical_shift))

    if u[7] < cfg.photometric_prob:
        c = 1 + sub.uniform(-cfg.contrast, cfg.contrast)
        b = sub.uniform(-cfg.brightness, cfg.brightness)
        img = np.clip((img - 0.5) * c + 0.5 + b, 0, 1).astype(np.float32)
    return img, mask, score


# -- superpixels -----------------------------------------------------------------

def _seed_grid(h: int, w: int, n: int):
    ky = max(1, int(round(np.sqrt(n * h / w))))
    kx = max(1, int(round(n / ky)))
    ys = (np.arange(ky) + 0.5) * h / ky
    xs = (np.arange(kx) + 0.5) * w / kx
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return yy.ravel(), xx.ravel()


def extract_superpixels(img, n_target: int, compactness: float = 0.2, iterations: int = 10) -> np.ndarray:
    """Grid-seeded SLIC-style clustering on intensity + position.

    Returns an (H, W) int label map with labels 0..N-1, each a connected region.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if not 1 <= n_target <= h * w:
        raise ContractError(f"n_target must be in [1, {h * w}], got {n_target}")
    if n_target == 1:
        return np.zeros((h, w), dtype=np.int64)
    step = np.sqrt(h * w / n_target)
    cy, cx = _seed_grid(h, w, n_target)
    yy, xx = np.mgrid[0:h, 0:w]
    py, px, pv = yy.ravel().astype(np.float64), xx.ravel().astype(np.float64), img.ravel()
    ci = img[np.clip(cy.astype(int), 0, h - 1), np.clip(cx.astype(int), 0, w - 1)].astype(np.float64)
    labels = np.zeros(h * w, dtype=np.int64)
    for _ in range(iterations):
        dy = py[:, None] - cy[None]
        dx = px[:, None] - cx[None]
        d = (pv[:, None] - ci[None]) ** 2 + (compactness ** 2) * (dy * dy + dx * dx) / step ** 2
        d[(np.abs(dy) > step) | (np.abs(dx) > step)] = np.inf
        orphan = ~np.isfinite(d).any(axis=1)
        if orphan.any():
            d[orphan] = (pv[orphan, None] - ci[None]) ** 2 + (compactness ** 2) * (dy[orphan] ** 2 + dx[orphan] ** 2) / step ** 2
        labels = d.argmin(axis=1)
        counts = np.bincount(labels, minlength=cy.size)
        nz = counts > 0
        cy[nz] = np.bincount(labels, py, cy.size)[nz] / counts[nz]
        cx[nz] = np.bincount(labels, px, cy.size)[nz] / counts[nz]
        ci[nz] = np.bincount(labels, pv, cy.size)[nz] / counts[nz]
    return _enforce_connectivity(labels.reshape(h, w), min_size=max(1, int(step * step / 4)))


def _enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    out = -np.ones_like(labels)
    pieces = []
    for lab in np.unique(labels):
        comp, n = ndimage.label(labels == lab)
        if n == 0:
            continue
        sizes = np.bincount(comp.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        if sizes[keep - 1] >= min_size:
            out[comp == keep] = lab
        for k in range(1, n + 1):
            if k != keep or sizes[keep - 1] < min_size:
                pieces.append(comp == k)
    if (out < 0).all():
        return np.zeros_like(labels)
    # absorb each orphan piece into the neighbouring label it touches most
    pending = pieces
    while pending:
        left = []
        for piece in pending:
            ring = ndimage.binary_dilation(piece) & ~piece
            neigh = out[ring]
            neigh = neigh[neigh >= 0]
            if neigh.size == 0:
                left.append(piece)
                continue
            out[piece] = np.bincount(neigh).argmax()
        if len(left) == len(pending):
            break
        pending = left
    _, first = np.unique(out.ravel(), return_index=True)
    order = np.argsort(first)
    remap = np.empty(out.max() + 1, dtype=np.int64)
    remap[np.unique(out.ravel())[order]] = np.arange(order.size)
    return remap[out]


# -- IO --------------------------------------------------------------------------

def write_pgm(path, img: np.ndarray, bits: int = 16) -> None:
    """Binary PGM from a [0, 1] float image (8 or 16 bit, big-endian)."""
    if bits not in (8, 16):
        raise ContractError("bits must be 8 or 16")
    maxval = 255 if bits == 8 else 65535
    data = np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * maxval)
    data = data.astype(">u2" if bits == 16 else np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return (data.astype(np.float64) / maxval).astype(np.float32)


def write_png(path, img: np.ndarray) -> None:
    """Grayscale float [0, 1] or uint8 RGB image to PNG."""
    from PIL import Image

    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(a).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        a = np.asarray(im)
    return a
