"""Differentiable primitives.

All image tensors are NCHW.  Every function accepts Tensors (or array-likes,
treated as constants) and returns a Tensor registered for ``backward``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .tensor import DimensionError, Tensor, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    # python-scalar constants follow the dtype of the tensor operand
    if a.dtype != b.dtype:
        if not a.requires_grad and a.size == 1:
            a = Tensor(a.data, dtype=b.dtype)
        elif not b.requires_grad and b.size == 1:
            b = Tensor(b.data, dtype=a.dtype)
    return a, b


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} and {b.shape}") from exc
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data / b.data
    except ValueError as exc:
        raise DimensionError(f"div: cannot broadcast {a.shape} and {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return make_result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clamp_min(x, lo: float) -> Tensor:
    x = as_tensor(x)
    keep = x.data > lo
    return make_result(np.where(keep, x.data, x.dtype.type(lo)), (x,), lambda g: (g * keep,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),))


def swish(x) -> Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s
    return make_result(out, (x,), lambda g: (g * (s + out * (1 - s)),))


# -- reductions and shape ------------------------------------------------------

def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), bw)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {x.shape} -> {shape}") from exc
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[idx])

    def bw(g):
        full = np.zeros_like(x.data)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_result(out, (x,), bw)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return make_result(out, ts, bw)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def dense(x, weight, bias=None) -> Tensor:
    """x (N, I) @ weight (I, O) + bias (O)."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# -- activations over an axis --------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), bw)


# -- convolution and pooling ---------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIKK kernel, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if kh != kw:
        raise DimensionError("conv2d: only square kernels are supported")
    k, s, p = kh, int(stride), int(padding)
    if h + 2 * p < k or w + 2 * p < k:
        raise DimensionError(f"conv2d: padded input {(h + 2 * p, w + 2 * p)} smaller than kernel {k}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
    ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    if k == 1 and p == 0:
        xs = x.data[:, :, ::s, ::s] if s > 1 else x.data
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = gm @ wmat
            if k == 1 and p == 0:
                d = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
                if s > 1:
                    gx = np.zeros_like(x.data)
                    gx[:, :, ::s, ::s] = d
                else:
                    gx = np.ascontiguousarray(d)
            else:
                d = dcols.reshape(n, ho, wo, c, k, k)
                gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, bw)


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel group) to zero mean and unit variance, then scale and shift per channel."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c, h, w = x.shape
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    out = xhat * gamma.data[:, None, None] + beta.data[:, None, None]

    def bw(g):
        gg = (g * gamma.data[:, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (gg - gg.mean(axis=2, keepdims=True) - xh * (gg * xh).mean(axis=2, keepdims=True))
        return gx.reshape(x.shape), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(out.astype(x.dtype), (x, gamma, beta), bw)


def max_pool2d(x) -> Tensor:
    """2x2 max pooling with stride 2 (odd trailing rows/cols dropped)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise DimensionError(f"max_pool2d: input {x.shape} too small")
    h2, w2 = h // 2, w // 2
    blocks = x.data[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :2 * h2, :2 * w2] = gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        return (gx,)

    return make_result(out, (x,), bw)


def avg_pool2d(x, size: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"avg_pool2d: {x.shape} not divisible by {size}")
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size),)

    return make_result(out, (x,), bw)


def global_avg_pool(x) -> Tensor:
    """NCHW -> NC."""
    return mean(x, axis=(2, 3))


def resample_separable(x, row_op: np.ndarray, col_op: np.ndarray) -> Tensor:
    """Apply fixed linear maps to the spatial axes: out = R @ x @ C^T."""
    x = as_tensor(x)
    if row_op.shape[1] != x.shape[-2] or col_op.shape[1] != x.shape[-1]:
        raise DimensionError(f"resample_separable: operators {row_op.shape},{col_op.shape} vs input {x.shape}")
    r = row_op.astype(x.dtype, copy=False)
    ct = np.ascontiguousarray(col_op.T.astype(x.dtype, copy=False))
    out = np.matmul(np.matmul(r, x.data), ct)

    def bw(g):
        return (np.matmul(np.matmul(r.T, g), ct.T),)

    return make_result(out, (x,), bw)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation operator (n_out, n_in) with pixel-centre alignment."""
    m = np.zeros((n_out, n_in))
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample2x(x) -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[-2:]
    return resample_separable(x, bilinear_matrix(h, 2 * h), bilinear_matrix(w, 2 * w))


def resize(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    if out_h < h and h % out_h == 0 and w % out_w == 0 and h // out_h == w // out_w:
        return avg_pool2d(x, h // out_h)
    return resample_separable(x, bilinear_matrix(h, out_h), bilinear_matrix(w, out_w))


# -- spatial transformer -------------------------------------------------------

def normalized_coords(n: int) -> np.ndarray:
    """Pixel-centre coordinates in [-1, 1]."""
    return (2 * np.arange(n) + 1) / n - 1


def affine_grid(theta, out_h: int, out_w: int) -> Tensor:
    """Sampling grid (N, out_h, out_w, 2) holding (x, y) source coordinates.

    ``theta`` is (N, 6) or (N, 2, 3) mapping output coordinates to input
    coordinates: [x_s, y_s] = [[a, b, tx], [c, d, ty]] @ [x, y, 1].
    """
    theta = as_tensor(theta)
    n = theta.shape[0]
    th = reshape(theta, (n, 2, 3))
    ys, xs = np.meshgrid(normalized_coords(out_h), normalized_coords(out_w), indexing="ij")
    base = np.stack([xs, ys, np.ones_like(xs)], axis=-1).reshape(-1, 3).astype(theta.dtype)
    # (N, P, 3) @ (N, 3, 2) -> (N, P, 2)
    grid = matmul(base, transpose(th, (0, 2, 1)))
    return reshape(grid, (n, out_h, out_w, 2))


def _sampling_plan(grid: np.ndarray, h: int, w: int):
    # pixel-space source positions
    px = ((grid[..., 0] + 1) * w - 1) / 2
    py = ((grid[..., 1] + 1) * h - 1) / 2
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    taps = []
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, yy * w + xx, 0)
        taps.append((idx, valid, wgt, dy, dx))
    return taps, fx, fy


def grid_sample(x, grid) -> Tensor:
    """Bilinear sampling of NCHW ``x`` at ``grid`` (N, Ho, Wo, 2); zeros outside."""
    x, grid = as_tensor(x), as_tensor(grid)
    if grid.ndim != 4 or grid.shape[-1] != 2:
        raise DimensionError(f"grid_sample: grid must be (N, Ho, Wo, 2), got {grid.shape}")
    n, c, h, w = x.shape
    if grid.shape[0] != n:
        raise DimensionError(f"grid_sample: batch mismatch {n} vs {grid.shape[0]}")
    ho, wo = grid.shape[1:3]
    g = grid.data
    taps, fx, fy = _sampling_plan(g, h, w)
    flat = x.data.reshape(n, c, h * w)
    mats = []
    out = np.empty((n, c, ho * wo), dtype=x.dtype)
    rows = np.arange(ho * wo)
    for b in range(n):
        data = np.concatenate([(t[2][b] * t[1][b]).reshape(-1) for t in taps])
        cols = np.concatenate([t[0][b].reshape(-1) for t in taps])
        m = sparse.csr_matrix((data.astype(x.dtype), (np.tile(rows, 4), cols)), shape=(ho * wo, h * w))
        mats.append(m)
        out[b] = (m @ flat[b].T).T
    out = out.reshape(n, c, ho, wo)

    def bw(gout):
        go = gout.reshape(n, c, ho * wo)
        gx = None
        if x.requires_grad:
            gx = np.empty_like(flat)
            for b in range(n):
                gx[b] = (mats[b].T @ go[b].T).T
            gx = gx.reshape(x.shape)
        gg = None
        if grid.requires_grad:
            v = []
            for idx, valid, _, _, _ in taps:
                gathered = np.take_along_axis(flat, np.broadcast_to(idx.reshape(n, 1, -1), (n, c, ho * wo)), axis=2)
                v.append(gathered.reshape(n, c, ho, wo) * valid[:, None])
            v00, v01, v10, v11 = v
            fxb, fyb = fx[:, None], fy[:, None]
            d_px = ((1 - fyb) * (v01 - v00) + fyb * (v11 - v10))
            d_py = ((1 - fxb) * (v10 - v00) + fxb * (v11 - v01))
            gpx = (gout * d_px).sum(axis=1)
            gpy = (gout * d_py).sum(axis=1)
            gg = np.stack([gpx * (w / 2), gpy * (h / 2)], axis=-1).astype(grid.dtype)
        return gx, gg

    return make_result(out, (x, grid), bw)
