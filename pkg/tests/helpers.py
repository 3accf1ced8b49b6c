import numpy as np


def numeric_grad(f, arr, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


# -- gradient suites shared by test_nn, test_model and the acceptance gate --

from sleepcnn import model as M  # noqa: E402
from sleepcnn import nn  # noqa: E402

LAYER_TYPES = ("conv_relu", "conv_linear", "maxpool2", "relu", "dense", "dropout", "softmax_cross_entropy")


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    small = np.abs(x) < margin
    x[small] = np.sign(x[small] + 1e-300) * margin * 2
    return x


def layer_case_error(kind: str, seed: int) -> float:
    """Max relative error between analytic and central-difference gradients for one case."""
    rng = np.random.default_rng(seed)
    if kind.startswith("conv"):
        n, c_in, c_out = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k = int(rng.integers(1, 6))
        length = k + int(rng.integers(0, 9))
        x = rng.normal(size=(n, c_in, length))
        layer = nn.ConvLayer(
            rng.normal(size=(c_out, c_in, k)),
            rng.normal(size=c_out),
            "relu" if kind == "conv_relu" else "linear",
        )
        r = rng.normal(size=(n, c_out, length - k + 1))
        if kind == "conv_relu":
            # keep pre-activations off the kink so differences stay smooth
            z = nn.conv1d(x, layer.kernel, layer.bias)
            layer.bias += np.where(np.abs(z).min(axis=(0, 2)) < 1e-3, 0.01, 0.0)

        def f():
            return float(np.sum(r * nn.conv1d_forward(x, layer)))

        dx, dw, db = nn.conv1d_backward(x, layer, r)
        return max(
            rel_error(dx, numeric_grad(f, x)),
            rel_error(dw, numeric_grad(f, layer.kernel)),
            rel_error(db, numeric_grad(f, layer.bias)),
        )
    if kind == "maxpool2":
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(2, 10)))
        x = rng.normal(size=shape)
        y, arg = nn.maxpool2_forward(x)
        r = rng.normal(size=y.shape)
        dx = nn.maxpool2_backward(r, arg, shape[-1])
        return rel_error(dx, numeric_grad(lambda: float(np.sum(r * nn.maxpool2_forward(x)[0])), x))
    if kind == "relu":
        x = _away_from_zero(rng, (int(rng.integers(1, 4)), int(rng.integers(1, 12))))
        r = rng.normal(size=x.shape)
        return rel_error(nn.relu_backward(x, r), numeric_grad(lambda: float(np.sum(r * nn.relu_forward(x))), x))
    if kind == "dense":
        n, d_in, d_out = int(rng.integers(1, 4)), int(rng.integers(1, 9)), int(rng.integers(1, 7))
        x = rng.normal(size=(n, d_in))
        layer = nn.DenseLayer(rng.normal(size=(d_in, d_out)), rng.normal(size=d_out))
        r = rng.normal(size=(n, d_out))

        def f():
            return float(np.sum(r * nn.dense_forward(x, layer)))

        dx, dw, db = nn.dense_backward(x, layer, r)
        return max(
            rel_error(dx, numeric_grad(f, x)),
            rel_error(dw, numeric_grad(f, layer.weights)),
            rel_error(db, numeric_grad(f, layer.bias)),
        )
    if kind == "dropout":
        x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 12))))
        r = rng.normal(size=x.shape)
        mask_seed = int(rng.integers(2**31))

        def f():
            return float(np.sum(r * nn.dropout(x, 0.5, nn.make_rng(mask_seed), True)[0]))

        _, mask = nn.dropout(x, 0.5, nn.make_rng(mask_seed), True)
        return rel_error(nn.dropout_backward(r, mask), numeric_grad(f, x))
    if kind == "softmax_cross_entropy":
        n = int(rng.integers(1, 4))
        z = rng.normal(scale=2.0, size=(n, 5))
        y = rng.integers(0, 5, size=n)
        _, _, dz = nn.softmax_cross_entropy(z, y)
        return rel_error(dz, numeric_grad(lambda: float(nn.softmax_cross_entropy(z, y)[0].sum()), z))
    raise ValueError(kind)


NETWORK_STEPS = (1e-5, 1e-6, 1e-7, 1e-8)


def _pattern_loss(model, x, y, training, mask_seed):
    """Mean loss plus the activation pattern (ReLU signs, pool argmaxes) that produced it."""
    z, (cache, *_rest) = M._forward(model, x, training, nn.make_rng(mask_seed))
    pattern = [part for _h, pre, arg in cache for part in (pre > 0.0, arg)]
    return float(nn.softmax_cross_entropy(z, y)[0].mean()), pattern


def _same(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def network_case_error(seed: int, coordinates: int = 0) -> float:
    """End-to-end check of the full network's loss gradient for one seeded case.

    Every parameter tensor is probed along its normalized analytic
    gradient and along one random direction; ``coordinates`` extra entries
    per tensor are probed individually. The loss is only piecewise smooth
    (ReLU, max pooling), so a probe is accepted at the largest step in
    ``NETWORK_STEPS`` whose two ends keep the activation pattern of the
    base point, i.e. the difference never straddles a kink. A probe with
    no such step counts as a failure (error 1.0).
    """
    rng = np.random.default_rng(seed)
    n_channels = 1 + seed % 2
    model = M.build_model(n_channels, seed)
    for name, t in model.tensors.items():
        if name.endswith(".bias"):
            t[...] = rng.normal(scale=0.05, size=t.shape)
    n = int(rng.integers(1, 3))
    x = rng.normal(size=(n, n_channels, 3000))
    y = rng.integers(0, 5, size=n)
    training = bool(seed % 3 == 0)
    mask_seed = int(rng.integers(2**31))

    _, grads, _ = M.loss_and_grads(model, x, y, training=training, rng=nn.make_rng(mask_seed))
    _, base_pattern = _pattern_loss(model, x, y, training, mask_seed)

    def directional(t, v):
        base = t.copy()
        try:
            for h in NETWORK_STEPS:
                t[...] = base + h * v
                up, p_up = _pattern_loss(model, x, y, training, mask_seed)
                t[...] = base - h * v
                down, p_down = _pattern_loss(model, x, y, training, mask_seed)
                if _same(p_up, base_pattern) and _same(p_down, base_pattern):
                    return (up - down) / (2 * h)
            return None
        finally:
            t[...] = base

    worst = 0.0
    for name, t in model.tensors.items():
        g = grads[name]
        probes = [g / max(np.linalg.norm(g), 1e-300), rng.normal(size=t.shape)]
        probes[1] /= np.linalg.norm(probes[1])
        for i in rng.choice(t.size, size=min(coordinates, t.size), replace=False):
            e = np.zeros(t.size)
            e[i] = 1.0
            probes.append(e.reshape(t.shape))
        for v in probes:
            numeric = directional(t, v)
            if numeric is None:
                return 1.0
            analytic = float(np.sum(g * v))
            # unit-norm directions: the tensor gradient norm is the natural scale
            scale = max(abs(analytic), abs(numeric), np.linalg.norm(g))
            if scale > 0:
                worst = max(worst, abs(analytic - numeric) / scale)
    return worst
