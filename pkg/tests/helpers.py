"""Finite-difference gradient oracle shared by the test modules."""
import numpy as np

from bsnet.tensor import Tensor, backward, check_mode


def numeric_grad(fn, arrays, i, coords, eps=1e-4):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[i]`` at ``coords``."""
    out = []
    for c in coords:
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[i][c] += eps
        minus[i][c] -= eps
        out.append((fn(*plus) - fn(*minus)) / (2 * eps))
    return np.array(out)


def gradcheck(build, arrays, eps=1e-4, max_coords=24, seed=0):
    """Return the worst relative error between analytic and numeric gradients.

    ``build(*tensors)`` must return a scalar Tensor.  Everything runs in
    float64.  For large inputs a random subset of coordinates is probed.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with check_mode():
        ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        loss = build(*ts)
        backward(loss)
        analytic = [t.grad.copy() for t in ts]

        def scalar(*arrs):
            return build(*[Tensor(a) for a in arrs]).item()

        worst = 0.0
        for i, a in enumerate(arrays):
            all_coords = list(np.ndindex(a.shape))
            if len(all_coords) > max_coords:
                pick = rng.choice(len(all_coords), size=max_coords, replace=False)
                all_coords = [all_coords[j] for j in pick]
            num = numeric_grad(scalar, arrays, i, all_coords, eps)
            ana = np.array([analytic[i][c] for c in all_coords])
            denom = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-10)
            worst = max(worst, float(np.linalg.norm(num - ana) / denom))
    return worst


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def primitive_cases(seed: int = 0):
    """(name, build, arrays) triples covering every differentiable primitive.

    Inputs avoid the kinks of relu / abs / max-pool by a margin larger than
    the finite-difference step.
    """
    from bsnet import functional as F

    rng = np.random.default_rng(seed)

    def away_from_zero(*shape):
        a = rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
        return a

    def distinct(*shape):
        # a permutation of well-separated values keeps max-pool argmax stable
        return (rng.permutation(int(np.prod(shape))).reshape(shape) * 0.05).astype(np.float64)

    fixed = {}

    def w(*shape):
        # fixed projection weights: drawn once per shape, reused on every evaluation
        if shape not in fixed:
            fixed[shape] = rng.standard_normal(shape)
        return fixed[shape]

    theta = np.array([0.9, 0.15, 0.05, -0.1, 1.05, -0.08]) + rng.normal(0, 0.02, 6)
    return [
        ("add", lambda a, b: F.sum(F.add(a, b) * w(3, 4)), [_rand(rng, 3, 4), _rand(rng, 4)]),
        ("sub", lambda a, b: F.sum(F.sub(a, b) * w(3, 4)), [_rand(rng, 3, 4), _rand(rng, 3, 1)]),
        ("mul", lambda a, b: F.sum(F.mul(a, b)), [_rand(rng, 2, 5), _rand(rng, 2, 5)]),
        ("div", lambda a, b: F.sum(F.div(a, b)), [_rand(rng, 2, 5), rng.uniform(0.5, 2.0, (2, 5))]),
        ("exp", lambda a: F.sum(F.exp(a) * w(6)), [_rand(rng, 6)]),
        ("log", lambda a: F.sum(F.log(a) * w(6)), [rng.uniform(0.2, 3.0, 6)]),
        ("abs", lambda a: F.sum(F.absolute(a) * w(7)), [away_from_zero(7)]),
        ("clamp_min", lambda a: F.sum(F.clamp_min(a, 0.05) * w(7)), [away_from_zero(7)]),
        ("relu", lambda a: F.sum(F.relu(a) * w(2, 6)), [away_from_zero(2, 6)]),
        ("sigmoid", lambda a: F.sum(F.sigmoid(a) * w(8)), [_rand(rng, 8) * 3]),
        ("swish", lambda a: F.sum(F.swish(a) * w(8)), [_rand(rng, 8) * 3]),
        ("sum_axis", lambda a: F.sum(F.sum(a, axis=1) * w(3)), [_rand(rng, 3, 4)]),
        ("mean", lambda a: F.sum(F.mean(a, axis=(0, 2), keepdims=True) * w(1, 3, 1)), [_rand(rng, 2, 3, 4)]),
        ("reshape_transpose", lambda a: F.sum(F.transpose(F.reshape(a, (4, 6)), (1, 0)) * w(6, 4)), [_rand(rng, 2, 3, 4)]),
        ("getitem", lambda a: F.sum(a[:, 1:3] * w(3, 2)) + F.sum(a[[0, 2, 2]] * w(3, 4)), [_rand(rng, 3, 4)]),
        ("concat", lambda a, b: F.sum(F.concat([a, b], axis=1) * w(2, 5, 3)), [_rand(rng, 2, 2, 3), _rand(rng, 2, 3, 3)]),
        ("stack", lambda a, b: F.sum(F.stack([a, b], axis=0) * w(2, 3)), [_rand(rng, 3), _rand(rng, 3)]),
        ("matmul", lambda a, b: F.sum(F.matmul(a, b) * w(3, 5)), [_rand(rng, 3, 4), _rand(rng, 4, 5)]),
        ("dense", lambda x, W, b: F.sum(F.dense(x, W, b) * w(2, 3)), [_rand(rng, 2, 4), _rand(rng, 4, 3), _rand(rng, 3)]),
        ("softmax", lambda a: F.sum(F.softmax(a, axis=-1) * w(3, 4)), [_rand(rng, 3, 4) * 2]),
        ("conv2d", lambda x, k, b: F.sum(F.conv2d(x, k, b, 1, 1) * w(2, 4, 8, 8)),
         [_rand(rng, 2, 3, 8, 8), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)]),
        ("conv2d_stride2", lambda x, k: F.sum(F.conv2d(x, k, None, 2, 1) * w(1, 2, 4, 4)),
         [_rand(rng, 1, 2, 7, 7), _rand(rng, 2, 2, 3, 3)]),
        ("conv2d_1x1", lambda x, k, b: F.sum(F.conv2d(x, k, b) * w(2, 3, 5, 5)),
         [_rand(rng, 2, 4, 5, 5), _rand(rng, 3, 4, 1, 1), _rand(rng, 3)]),
        ("max_pool2d", lambda a: F.sum(F.max_pool2d(a) * w(1, 2, 3, 3)), [distinct(1, 2, 6, 6)]),
        ("avg_pool2d", lambda a: F.sum(F.avg_pool2d(a, 2) * w(1, 2, 3, 3)), [_rand(rng, 1, 2, 6, 6)]),
        ("global_avg_pool", lambda a: F.sum(F.global_avg_pool(a) * w(2, 3)), [_rand(rng, 2, 3, 4, 4)]),
        ("upsample2x", lambda a: F.sum(F.upsample2x(a) * w(1, 2, 6, 8)), [_rand(rng, 1, 2, 3, 4)]),
        ("resize", lambda a: F.sum(F.resize(a, 5, 7) * w(1, 1, 5, 7)), [_rand(rng, 1, 1, 4, 4)]),
        ("group_norm", lambda x, g, b: F.sum(F.group_norm(x, g, b, 2) * w(2, 4, 3, 3)),
         [_rand(rng, 2, 4, 3, 3), _rand(rng, 4), _rand(rng, 4)]),
        ("affine_grid", lambda t: F.sum(F.affine_grid(F.reshape(t, (1, 6)), 5, 4) * w(1, 5, 4, 2)), [theta.copy()]),
        ("grid_sample", lambda x, t: F.sum(F.grid_sample(x, F.affine_grid(F.reshape(t, (1, 6)), 6, 6)) * w(1, 2, 6, 6)),
         [_rand(rng, 1, 2, 6, 6), theta.copy()]),
    ]


def model_to_float64(model) -> None:
    for p in model.parameters():
        p.data = p.data.astype(np.float64)
        p.grad = np.zeros_like(p.data)


def model_gradcheck(model, loss_fn, x, param_names=(), n_coords=12, eps=1e-5, seed=0):
    """Worst relative error of d loss / d (input, selected parameters), float64 throughout."""
    rng = np.random.default_rng(seed)
    named = dict(model.named_parameters())
    with check_mode():
        model_to_float64(model)
        xt = Tensor(np.asarray(x, np.float64), requires_grad=True)
        for p in model.parameters():
            p.grad[...] = 0
        backward(loss_fn(model, xt))
        targets = [("input", xt.data, xt.grad.copy())] + [(n, named[n].data, named[n].grad.copy()) for n in param_names]

        def value():
            return loss_fn(model, Tensor(xt.data)).item()

        worst = 0.0
        for name, arr, grad in targets:
            coords = [tuple(int(i) for i in np.unravel_index(j, arr.shape)) for j in rng.choice(arr.size, min(n_coords, arr.size), replace=False)]
            num = []
            for c in coords:
                old = arr[c]
                arr[c] = old + eps
                up = value()
                arr[c] = old - eps
                down = value()
                arr[c] = old
                num.append((up - down) / (2 * eps))
            num = np.array(num)
            ana = np.array([grad[c] for c in coords])
            denom = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-10)
            worst = max(worst, float(np.linalg.norm(num - ana) / denom))
    return worst
