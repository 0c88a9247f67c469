"""Finite-difference verification of every layer and loss backward pass.

Each check draws a random instance, reduces the forward output to a scalar
via a random projection and compares the analytic gradient with
``finite_diff_grad``. The reported figure is the worst norm-wise relative
error over all points.
"""

import numpy as np

from . import layers as L
from . import losses
from .errors import ConfigError
from .numkit import finite_diff_grad, l2_normalize, make_rng, relative_error

H = 1e-5


def _away_from_kink(rng, shape, tol=1e-3):
    x = rng.standard_normal(shape)
    small = np.abs(x) < tol
    x[small] = np.where(x[small] >= 0, tol, -tol) * 10
    return x


def _compare(pairs, corrupt):
    """``pairs`` is a list of (analytic, numeric); returns one relative error."""
    a = np.concatenate([np.ravel(p[0]) for p in pairs])
    n = np.concatenate([np.ravel(p[1]) for p in pairs])
    if corrupt:
        a = a * 1.01
    return relative_error(a, n)


def check_affine(rng, corrupt=False):
    W, b, x = rng.standard_normal((4, 3)), rng.standard_normal(3), rng.standard_normal((2, 4))
    c = rng.standard_normal((2, 3))
    y, cache = L.affine_forward(W, b, x)
    dx, dW, db = L.affine_backward(cache, c)
    return _compare([
        (dx, finite_diff_grad(lambda v: np.sum(c * L.affine_forward(W, b, v)[0]), x, H)),
        (dW, finite_diff_grad(lambda v: np.sum(c * L.affine_forward(v, b, x)[0]), W, H)),
        (db, finite_diff_grad(lambda v: np.sum(c * L.affine_forward(W, v, x)[0]), b, H)),
    ], corrupt)


def check_conv2d(rng, corrupt=False):
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    K, bias = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    x = rng.standard_normal((2, 2, 5, 6))
    y, cache = L.conv2d_forward(K, bias, x, stride, padding)
    c = rng.standard_normal(y.shape)
    dx, dK, db = L.conv2d_backward(cache, c)

    def f(k=K, bb=bias, xx=x):
        return np.sum(c * L.conv2d_forward(k, bb, xx, stride, padding)[0])

    return _compare([
        (dx, finite_diff_grad(lambda v: f(xx=v), x, H)),
        (dK, finite_diff_grad(lambda v: f(k=v), K, H)),
        (db, finite_diff_grad(lambda v: f(bb=v), bias, H)),
    ], corrupt)


def check_prelu(rng, corrupt=False):
    x = _away_from_kink(rng, (3, 7))
    a = float(rng.uniform(-0.5, 1.0))
    c = rng.standard_normal(x.shape)
    _, cache = L.prelu_forward(a, x)
    dx, da = L.prelu_backward(cache, c)
    return _compare([
        (dx, finite_diff_grad(lambda v: np.sum(c * L.prelu_forward(a, v)[0]), x, H)),
        (da, finite_diff_grad(lambda v: np.sum(c * L.prelu_forward(v[0], x)[0]), np.array([a]), H)),
    ], corrupt)


def check_instance_norm(rng, corrupt=False):
    x = rng.standard_normal((2, 3, 4, 4)) * rng.uniform(0.5, 2.0) + rng.standard_normal()
    c = rng.standard_normal(x.shape)
    _, cache = L.instance_norm_forward(x)
    dx = L.instance_norm_backward(cache, c)
    return _compare([(dx, finite_diff_grad(lambda v: np.sum(c * L.instance_norm_forward(v)[0]), x, H))], corrupt)


def check_global_depthwise_pool(rng, corrupt=False):
    K, x = rng.standard_normal((3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
    c = rng.standard_normal((2, 3))
    _, cache = L.global_depthwise_pool_forward(K, x)
    dx, dK = L.global_depthwise_pool_backward(cache, c)
    return _compare([
        (dx, finite_diff_grad(lambda v: np.sum(c * L.global_depthwise_pool_forward(K, v)[0]), x, H)),
        (dK, finite_diff_grad(lambda v: np.sum(c * L.global_depthwise_pool_forward(v, x)[0]), K, H)),
    ], corrupt)


def check_l2_normalize(rng, corrupt=False):
    v = rng.standard_normal((3, 6))
    c = rng.standard_normal(v.shape)
    _, cache = L.l2_normalize_forward(v)
    dv = L.l2_normalize_backward(cache, c)
    return _compare([(dv, finite_diff_grad(lambda u: np.sum(c * L.l2_normalize_forward(u)[0]), v, H))], corrupt)


def check_continuous_dropout(rng, corrupt=False):
    # sigma = 0 makes the layer deterministic, so finite differences apply
    x, mu = rng.standard_normal((3, 5)), float(rng.uniform(0.05, 1.0))
    c = rng.standard_normal(x.shape)
    _, cache = L.continuous_dropout_forward(x, mu, 0.0, "train")
    dx = L.continuous_dropout_backward(cache, c)
    f = lambda v: np.sum(c * L.continuous_dropout_forward(v, mu, 0.0, "train")[0])  # noqa: E731
    return _compare([(dx, finite_diff_grad(f, x, H))], corrupt)


def check_softmax_ce(rng, corrupt=False):
    z = rng.standard_normal((4, 5)) * 3
    y = rng.integers(0, 5, size=4)
    _, g = losses.softmax_ce(z, y)
    return _compare([(g, finite_diff_grad(lambda v: losses.softmax_ce(v, y)[0], z, H))], corrupt)


def _loss_instance(rng):
    B, N, M = 4, 6, 5
    F = l2_normalize(rng.standard_normal((B, N)))
    W = rng.standard_normal((N, M))
    y = rng.integers(0, M, size=B)
    cfg = losses.LossConfig(s=float(rng.uniform(1.0, 30.0)), m=float(rng.uniform(0.0, 0.5)), alpha=0.3)
    return F, y, W, cfg


def _check_metric_loss(fn, rng, corrupt):
    F, y, W, cfg = _loss_instance(rng)
    out = fn(F, y, W, cfg)
    return _compare([
        (out.grad_embeddings, finite_diff_grad(lambda v: fn(v, y, W, cfg).loss, F, H)),
        (out.grad_W, finite_diff_grad(lambda v: fn(F, y, v, cfg).loss, W, H)),
    ], corrupt)


def check_am_softmax(rng, corrupt=False):
    return _check_metric_loss(losses.am_softmax, rng, corrupt)


def check_identity_loss(rng, corrupt=False):
    # keep the hinge clearly inactive so the finite-difference stencil never crosses it
    while True:
        F, y, W, cfg = _loss_instance(rng)
        if losses.identity_loss(F, y, W, cfg).loss > 1e-2:
            break
    fn = losses.identity_loss
    out = fn(F, y, W, cfg)
    return _compare([
        (out.grad_embeddings, finite_diff_grad(lambda v: fn(v, y, W, cfg).loss, F, H)),
        (out.grad_W, finite_diff_grad(lambda v: fn(F, y, v, cfg).loss, W, H)),
    ], corrupt)


def _check_model(cfg, rng, corrupt):
    model = L.Model(cfg)
    params = model.init_params(rng)
    for name in params:
        if name.endswith("slope"):
            params[name] = params[name] + rng.uniform(-0.1, 0.1)
    x = rng.standard_normal((2,) + cfg.input_shape)
    c = rng.standard_normal((2, cfg.embed_dim))
    emb, cache = model.forward(params, x)
    grads, dx = model.backward(params, cache, c)
    pairs = [(dx, finite_diff_grad(lambda v: np.sum(c * model.forward(params, v)[0]), x, H))]
    for name in sorted(grads):
        if name.startswith("1.conv2d.bias") and cfg.arch == "conv":
            # bias ahead of an instance norm has an identically zero gradient
            continue

        def f(v, name=name):
            p = dict(params)
            p[name] = v
            return np.sum(c * model.forward(p, x)[0])

        pairs.append((grads[name], finite_diff_grad(f, params[name], H)))
    return _compare(pairs, corrupt)


def check_model_vector(rng, corrupt=False):
    cfg = L.ModelConfig(input_shape=(6,), arch="vector", hidden=(5,), embed_dim=4, num_classes=3)
    return _check_model(cfg, rng, corrupt)


def check_model_conv(rng, corrupt=False):
    cfg = L.ModelConfig(input_shape=(3, 7, 6), arch="conv", channels=(3, 4), embed_dim=4, num_classes=3)
    return _check_model(cfg, rng, corrupt)


LAYER_CHECKS = {
    "affine": check_affine,
    "conv2d": check_conv2d,
    "prelu": check_prelu,
    "instance_norm": check_instance_norm,
    "global_depthwise_pool": check_global_depthwise_pool,
    "l2_normalize": check_l2_normalize,
    "continuous_dropout": check_continuous_dropout,
}
LOSS_CHECKS = {
    "softmax_ce": check_softmax_ce,
    "am_softmax": check_am_softmax,
    "identity_loss": check_identity_loss,
}
MODEL_CHECKS = {
    "model_vector": check_model_vector,
    "model_conv": check_model_conv,
}
ALL_CHECKS = {**LAYER_CHECKS, **LOSS_CHECKS, **MODEL_CHECKS}


def run_gradcheck(seed=0, points=50, components=None, corrupt=None):
    """Worst relative error per component over ``points`` random instances.

    ``corrupt`` names a component whose analytic gradient is deliberately
    scaled by 1.01; it exists to exercise the failure path.
    """
    unknown = sorted(set(components or ()) - set(ALL_CHECKS))
    if unknown:
        raise ConfigError(f"unknown gradcheck components {unknown}; choose from {sorted(ALL_CHECKS)}")
    rng = make_rng(seed)
    report = {}
    for name in components or ALL_CHECKS:
        check = ALL_CHECKS[name]
        report[name] = max(check(rng, corrupt == name) for _ in range(points))
    return report


def format_report(report, threshold):
    lines = []
    for name, err in report.items():
        status = "ok" if err < threshold else "FAIL"
        lines.append(f"{name:<24s} {err:.3e}  {status}")
    return lines
