"""Differentiable layers with explicit forward/backward passes, the toy
backbone assembled from them, and the binary checkpoint format.

All functional ops accept either a single sample or a leading batch axis:
vectors are ``(D,)`` or ``(B, D)``, feature maps ``(C, H, W)`` or
``(B, C, H, W)``. Every forward returns ``(output, cache)``; the matching
backward consumes that cache.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ConfigMismatch, DegenerateNorm, ShapeMismatch, StaleCache
from .numkit import EPS_NORM, make_rng

LAYER_KINDS = (
    "affine",
    "conv2d",
    "prelu",
    "instance_norm",
    "global_depthwise_pool",
    "l2_normalize",
    "continuous_dropout",
)


# ---------------------------------------------------------------------------
# functional ops


def affine_forward(W, b, x):
    """``y_j = sum_i W[i, j] x_i + b_j``; ``W`` has shape (in, out)."""
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeMismatch(f"affine: W {W.shape}, b {b.shape}, x {x.shape}")
    return x @ W + b, (x, W)


def affine_backward(cache, g):
    x, W = cache
    x2 = x.reshape(-1, W.shape[0])
    g2 = g.reshape(-1, W.shape[1])
    return g @ W.T, x2.T @ g2, g2.sum(axis=0)


def _as_batch_map(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatch(f"expected (C,H,W) or (B,C,H,W), got {x.shape}")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv2d_forward(kernel, bias, x, stride=1, padding=0):
    """Cross-correlation with a square ``(O, C, k, k)`` kernel."""
    xb, squeeze = _as_batch_map(x)
    O, C, k, k2 = kernel.shape
    if k != k2 or xb.shape[1] != C or bias.shape != (O,):
        raise ShapeMismatch(f"conv2d: kernel {kernel.shape}, bias {bias.shape}, x {xb.shape}")
    H, W = xb.shape[2:]
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeMismatch(f"conv2d: output would be {Ho}x{Wo}")
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    y = np.einsum("bchwij,ocij->bohw", win, kernel, optimize=True) + bias[None, :, None, None]
    cache = (xp.shape, win, kernel, stride, padding, squeeze)
    return (y[0] if squeeze else y), cache


def conv2d_backward(cache, g):
    """Returns ``(dx, dkernel, dbias)``."""
    xp_shape, win, kernel, stride, padding, squeeze = cache
    gb = g[None] if squeeze else g
    _, _, Ho, Wo = gb.shape
    k = kernel.shape[2]
    dkernel = np.einsum("bohw,bchwij->ocij", gb, win, optimize=True)
    dbias = gb.sum(axis=(0, 2, 3))
    dxp = np.zeros(xp_shape)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += np.einsum(
                "bohw,oc->bchw", gb, kernel[:, :, i, j], optimize=True
            )
    H, W = xp_shape[2] - 2 * padding, xp_shape[3] - 2 * padding
    dx = dxp[:, :, padding:padding + H, padding:padding + W]
    return (dx[0] if squeeze else dx), dkernel, dbias


def prelu_forward(a, x):
    """Identity for ``x >= 0``, slope ``a`` below zero. ``a`` is one shared scalar."""
    x = np.asarray(x, dtype=np.float64)
    neg = x < 0
    return np.where(neg, a * x, x), (x, neg, float(a))


def prelu_backward(cache, g):
    """Returns ``(dx, da)``."""
    x, neg, a = cache
    return np.where(neg, a * g, g), float(np.sum(np.where(neg, g * x, 0.0)))


def instance_norm_forward(x, eps=1e-5):
    """Per-sample, per-channel spatial standardization, no affine terms."""
    xb, squeeze = _as_batch_map(x)
    mean = xb.mean(axis=(2, 3), keepdims=True)
    xc = xb - mean
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = xc * inv_std
    return (y[0] if squeeze else y), (y, inv_std, squeeze)


def instance_norm_backward(cache, g):
    y, inv_std, squeeze = cache
    gb = g[None] if squeeze else g
    gm = gb.mean(axis=(2, 3), keepdims=True)
    gym = np.mean(gb * y, axis=(2, 3), keepdims=True)
    dx = inv_std * (gb - gm - y * gym)
    return dx[0] if squeeze else dx


def global_depthwise_pool_forward(K, x):
    """``y_c = sum_{h,w} K[c,h,w] * x[c,h,w]``: a learnable weight per channel and position."""
    xb, squeeze = _as_batch_map(x)
    if K.shape != xb.shape[1:]:
        raise ShapeMismatch(f"pool weights {K.shape} vs feature map {xb.shape[1:]}")
    y = np.einsum("bchw,chw->bc", xb, K)
    return (y[0] if squeeze else y), (xb, K, squeeze)


def global_depthwise_pool_backward(cache, g):
    """Returns ``(dx, dK)``."""
    xb, K, squeeze = cache
    gb = g[None] if squeeze else g
    dK = np.einsum("bc,bchw->chw", gb, xb)
    dx = gb[:, :, None, None] * K[None]
    return (dx[0] if squeeze else dx), dK


def l2_normalize_forward(v):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm <= EPS_NORM):
        raise DegenerateNorm("embedding head received a zero vector")
    f = v / norm
    return f, (f, norm)


def l2_normalize_backward(cache, g):
    # Jacobian of v / |v| is (I - f f^T) / |v|
    f, norm = cache
    return (g - f * np.sum(f * g, axis=-1, keepdims=True)) / norm


def continuous_dropout_forward(x, mu=0.1, sigma=0.03, mode="train", rng=None):
    """Multiplicative Gaussian noise ``y = x * xi``, ``xi ~ N(mu, sigma^2)``.

    Eval mode multiplies by ``mu`` so train and eval expectations agree.
    """
    x = np.asarray(x, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if mode == "train":
        if sigma == 0:
            xi = np.full(x.shape, float(mu))
        else:
            if rng is None:
                raise ValueError("train-mode dropout needs an rng")
            xi = rng.normal(mu, sigma, size=x.shape)
    elif mode == "eval":
        xi = np.full(x.shape, float(mu))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return x * xi, xi


def continuous_dropout_backward(cache, g):
    return g * cache


# ---------------------------------------------------------------------------
# layer objects


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = None

    def __init__(self, name, in_shape):
        self.name = name
        self.in_shape = tuple(in_shape)

    @property
    def out_shape(self):
        return self.in_shape

    def param_shapes(self):
        return {}

    def init_params(self, rng):
        return {}

    def pname(self, p):
        return f"{self.name}.{p}"

    def forward(self, params, x, mode, rng):
        raise NotImplementedError

    def backward(self, params, cache, g):
        """Returns ``(dx, {param_name: grad})``."""
        raise NotImplementedError


class Affine(Layer):
    kind = "affine"

    def __init__(self, name, in_shape, out_features):
        super().__init__(name, in_shape)
        if len(self.in_shape) != 1:
            raise ConfigError(f"affine layer needs a vector input, got {in_shape}")
        self.out_features = int(out_features)

    @property
    def out_shape(self):
        return (self.out_features,)

    def param_shapes(self):
        n = self.in_shape[0]
        return {self.pname("weight"): (n, self.out_features), self.pname("bias"): (self.out_features,)}

    def init_params(self, rng):
        n = self.in_shape[0]
        return {
            self.pname("weight"): glorot_uniform(rng, (n, self.out_features), n, self.out_features),
            self.pname("bias"): np.zeros(self.out_features),
        }

    def forward(self, params, x, mode, rng):
        return affine_forward(params[self.pname("weight")], params[self.pname("bias")], x)

    def backward(self, params, cache, g):
        dx, dW, db = affine_backward(cache, g)
        return dx, {self.pname("weight"): dW, self.pname("bias"): db}


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, name, in_shape, out_channels, kernel=3, stride=2, padding=1):
        super().__init__(name, in_shape)
        if len(self.in_shape) != 3:
            raise ConfigError(f"conv2d needs a (C,H,W) input, got {in_shape}")
        self.out_channels = int(out_channels)
        self.kernel, self.stride, self.padding = int(kernel), int(stride), int(padding)
        C, H, W = self.in_shape
        self._out = (
            self.out_channels,
            conv_output_size(H, self.kernel, self.stride, self.padding),
            conv_output_size(W, self.kernel, self.stride, self.padding),
        )
        if self._out[1] < 1 or self._out[2] < 1:
            raise ConfigError(f"conv2d {name}: input {in_shape} too small")

    @property
    def out_shape(self):
        return self._out

    def param_shapes(self):
        C = self.in_shape[0]
        return {
            self.pname("weight"): (self.out_channels, C, self.kernel, self.kernel),
            self.pname("bias"): (self.out_channels,),
        }

    def init_params(self, rng):
        C, k = self.in_shape[0], self.kernel
        shape = (self.out_channels, C, k, k)
        return {
            self.pname("weight"): glorot_uniform(rng, shape, C * k * k, self.out_channels * k * k),
            self.pname("bias"): np.zeros(self.out_channels),
        }

    def forward(self, params, x, mode, rng):
        return conv2d_forward(
            params[self.pname("weight")], params[self.pname("bias")], x, self.stride, self.padding
        )

    def backward(self, params, cache, g):
        dx, dk, db = conv2d_backward(cache, g)
        return dx, {self.pname("weight"): dk, self.pname("bias"): db}


class PReLU(Layer):
    kind = "prelu"

    def __init__(self, name, in_shape, init=0.25):
        super().__init__(name, in_shape)
        self.init = float(init)

    def param_shapes(self):
        return {self.pname("slope"): (1,)}

    def init_params(self, rng):
        return {self.pname("slope"): np.array([self.init])}

    def forward(self, params, x, mode, rng):
        return prelu_forward(params[self.pname("slope")][0], x)

    def backward(self, params, cache, g):
        dx, da = prelu_backward(cache, g)
        return dx, {self.pname("slope"): np.array([da])}


class InstanceNorm(Layer):
    kind = "instance_norm"

    def __init__(self, name, in_shape, eps=1e-5):
        super().__init__(name, in_shape)
        if len(self.in_shape) != 3:
            raise ConfigError("instance norm needs a (C,H,W) input")
        self.eps = float(eps)

    def forward(self, params, x, mode, rng):
        return instance_norm_forward(x, self.eps)

    def backward(self, params, cache, g):
        return instance_norm_backward(cache, g), {}


class GlobalDepthwisePool(Layer):
    kind = "global_depthwise_pool"

    @property
    def out_shape(self):
        return (self.in_shape[0],)

    def param_shapes(self):
        return {self.pname("weight"): self.in_shape}

    def init_params(self, rng):
        _, H, W = self.in_shape
        # start as plain global average pooling
        return {self.pname("weight"): np.full(self.in_shape, 1.0 / (H * W))}

    def forward(self, params, x, mode, rng):
        return global_depthwise_pool_forward(params[self.pname("weight")], x)

    def backward(self, params, cache, g):
        dx, dK = global_depthwise_pool_backward(cache, g)
        return dx, {self.pname("weight"): dK}


class L2NormalizeHead(Layer):
    kind = "l2_normalize"

    def forward(self, params, x, mode, rng):
        return l2_normalize_forward(x)

    def backward(self, params, cache, g):
        return l2_normalize_backward(cache, g), {}


class ContinuousDropout(Layer):
    kind = "continuous_dropout"

    def __init__(self, name, in_shape, mu=0.1, sigma=0.03):
        super().__init__(name, in_shape)
        self.mu, self.sigma = float(mu), float(sigma)

    def forward(self, params, x, mode, rng):
        return continuous_dropout_forward(x, self.mu, self.sigma, mode, rng)

    def backward(self, params, cache, g):
        return continuous_dropout_backward(cache, g), {}


_LAYER_CLASSES = {
    cls.kind: cls
    for cls in (Affine, Conv2d, PReLU, InstanceNorm, GlobalDepthwisePool, L2NormalizeHead, ContinuousDropout)
}


# ---------------------------------------------------------------------------
# model


@dataclass
class ModelConfig:
    """Toy backbone description.

    ``arch="conv"`` builds InstanceNorm, Conv, InstanceNorm, PReLU, Conv,
    PReLU, global depthwise pooling and an affine embedding layer.
    ``arch="vector"`` builds an Affine/PReLU stack for feature-vector inputs.
    Both end in an L2-normalization head.
    """

    input_shape: tuple = (32,)
    arch: str = "vector"
    hidden: tuple = (128,)
    channels: tuple = (8, 16)
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    embed_dim: int = 256
    num_classes: int = 2
    prelu_init: float = 0.25
    embed_prelu: bool = True
    dropout: bool = False
    dropout_mu: float = 0.1
    dropout_sigma: float = 0.03
    in_eps: float = 1e-5

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.channels = tuple(int(c) for c in self.channels)
        if self.arch not in ("vector", "conv"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.embed_dim < 1 or self.num_classes < 1:
            raise ConfigError("embed_dim and num_classes must be >= 1")
        if self.arch == "vector" and len(self.input_shape) != 1:
            raise ConfigError("vector arch expects a 1-D input shape")
        if self.arch == "conv" and (len(self.input_shape) != 3 or len(self.channels) != 2):
            raise ConfigError("conv arch expects a (C,H,W) input and two channel counts")

    def layer_specs(self):
        """Ordered ``(kind, kwargs)`` pairs describing the layer sequence."""
        specs = []
        drop = ("continuous_dropout", {"mu": self.dropout_mu, "sigma": self.dropout_sigma})
        if self.arch == "conv":
            conv = {"kernel": self.kernel, "stride": self.stride, "padding": self.padding}
            specs += [
                ("instance_norm", {"eps": self.in_eps}),
                ("conv2d", dict(conv, out_channels=self.channels[0])),
                ("instance_norm", {"eps": self.in_eps}),
                ("prelu", {"init": self.prelu_init}),
                ("conv2d", dict(conv, out_channels=self.channels[1])),
                ("prelu", {"init": self.prelu_init}),
            ]
            if self.dropout:
                specs.append(drop)
            specs.append(("global_depthwise_pool", {}))
        else:
            for h in self.hidden:
                specs += [("affine", {"out_features": h}), ("prelu", {"init": self.prelu_init})]
                if self.dropout:
                    specs.append(drop)
        specs.append(("affine", {"out_features": self.embed_dim}))
        if self.embed_prelu:
            specs.append(("prelu", {"init": self.prelu_init}))
        specs.append(("l2_normalize", {}))
        return specs

    def to_dict(self):
        d = asdict(self)
        for k in ("input_shape", "hidden", "channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


CLASSIFIER = "classifier.weight"


@dataclass
class Cache:
    layer_caches: list
    out_shape: tuple
    in_shape: tuple = ()


class Model:
    """Layer sequence built from a ModelConfig.

    Parameters live in a flat ``{name: ndarray}`` dict owned by the caller;
    the classifier prototypes (``classifier.weight``, N x M) are part of it
    but are consumed by the loss, not by ``forward``.
    """

    def __init__(self, config):
        self.config = config
        self.layers = []
        shape = config.input_shape
        for idx, (kind, kwargs) in enumerate(config.layer_specs()):
            layer = _LAYER_CLASSES[kind](f"{idx}.{kind}", shape, **kwargs)
            self.layers.append(layer)
            shape = layer.out_shape

    def param_shapes(self):
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        shapes[CLASSIFIER] = (self.config.embed_dim, self.config.num_classes)
        return shapes

    def init_params(self, rng):
        rng = make_rng(rng)
        params = {}
        for layer in self.layers:
            params.update(layer.init_params(rng))
        N, M = self.config.embed_dim, self.config.num_classes
        params[CLASSIFIER] = glorot_uniform(rng, (N, M), N, M)
        return params

    def head_param_names(self):
        """Classifier, global depthwise pooling weights and the embedding layer
        (final affine plus its activation)."""
        names = {CLASSIFIER}
        affines = [l for l in self.layers if l.kind == "affine"]
        for layer in self.layers:
            if layer.kind == "global_depthwise_pool":
                names |= set(layer.param_shapes())
        last = self.layers.index(affines[-1])
        for layer in self.layers[last:]:
            names |= set(layer.param_shapes())
        return names

    def forward(self, params, x, mode="eval", rng=None):
        x = np.asarray(x, dtype=np.float64)
        shape = self.config.input_shape
        if x.shape[-len(shape):] != shape or x.ndim not in (len(shape), len(shape) + 1):
            raise ShapeMismatch(f"input {x.shape} does not match model input {shape}")
        caches = []
        h = x
        for layer in self.layers:
            h, c = layer.forward(params, h, mode, rng)
            caches.append(c)
        return h, Cache(caches, h.shape, x.shape)

    def backward(self, params, cache, grad_embedding, skip_head=False):
        """Returns ``(param_grads, input_grad)``; classifier grads are not included.

        With ``skip_head`` the gradient is taken w.r.t. the features entering
        the L2-normalization head (see ``prehead_features``).
        """
        g = np.asarray(grad_embedding, dtype=np.float64)
        if g.shape != cache.out_shape or len(cache.layer_caches) != len(self.layers):
            raise StaleCache(f"gradient {g.shape} does not match cached output {cache.out_shape}")
        grads = {}
        pairs = list(zip(self.layers, cache.layer_caches))
        if skip_head:
            pairs = pairs[:-1]
        for layer, c in reversed(pairs):
            g, pg = layer.backward(params, c, g)
            grads.update(pg)
        return grads, g

    @staticmethod
    def prehead_features(cache):
        """Un-normalized features that entered the L2-normalization head."""
        f, norm = cache.layer_caches[-1]
        return f * norm


_MODEL_CACHE = {}


def _model_for(config):
    key = config.digest()
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = Model(config)
    return _MODEL_CACHE[key]


def model_forward(config, params, x, mode="eval", rng=None):
    return _model_for(config).forward(params, x, mode, rng)


def model_backward(config, params, cache, grad_embedding):
    return _model_for(config).backward(params, cache, grad_embedding)


# ---------------------------------------------------------------------------
# checkpoint file
#
# layout (little-endian):
#   b"RMCKPT1\n"
#   u32 config_json_len, config_json (utf-8)
#   32-byte sha256 digest of the canonical config json
#   u32 block_count
#   per block: u16 name_len, name, u8 ndim, ndim * u32 dims, float64 data
#   u32 meta_json_len, meta_json

CKPT_MAGIC = b"RMCKPT1\n"


def save_checkpoint(path, config, params, meta=None):
    cfg_json = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", len(cfg_json)), cfg_json, config.digest()]
    names = sorted(params)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        bname = name.encode()
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    meta_json = json.dumps(meta or {}, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta_json)) + meta_json)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    """Returns ``(ModelConfig, params, meta)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(CKPT_MAGIC):
        raise ConfigMismatch(f"{path}: not a checkpoint file")
    off = len(CKPT_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise ConfigMismatch(f"{path}: truncated checkpoint")
        chunk = buf[off:off + n]
        off += n
        return chunk

    (n,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_dict(json.loads(take(n)))
    if take(32) != config.digest():
        raise ConfigMismatch(f"{path}: config digest does not match")
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    (ln,) = struct.unpack("<I", take(4))
    meta = json.loads(take(ln))
    expected = Model(config).param_shapes()
    got = {k: v.shape for k, v in params.items()}
    if got != {k: tuple(v) for k, v in expected.items()}:
        raise ConfigMismatch(f"{path}: parameter blocks do not match the stored config")
    return config, params, meta
