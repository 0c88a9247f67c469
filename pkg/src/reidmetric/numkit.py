"""Dense numeric core: normalization, softmax, cosine geometry, seeded RNG and
a central finite-difference gradient oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Random streams come from numpy's ``Generator`` over the PCG64 bit generator;
PCG64 output is specified bit-for-bit, so a given seed reproduces the same
stream on every platform.
"""

import numpy as np

from .errors import DegenerateNorm, ShapeMismatch

EPS_NORM = 1e-12


def as_matrix(values, rows=None, cols=None):
    """Return ``values`` as a finite float64 2-D array, optionally shape-checked."""
    a = np.ascontiguousarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {a.shape}")
    if (rows is not None and a.shape[0] != rows) or (cols is not None and a.shape[1] != cols):
        raise ShapeMismatch(f"expected ({rows}, {cols}), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    return a


def make_rng(seed):
    """Seeded PCG64 generator. Accepts an int, a SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(int(seed)))


def spawn_rngs(seed, n, stream=0):
    """``n`` independent child generators derived from ``(seed, stream)``.

    Distinct ``stream`` tags keep e.g. data generation and model
    initialization from sharing random streams under one user seed.
    """
    children = np.random.SeedSequence([int(stream), int(seed)]).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def l2_normalize(v, axis=-1):
    """Scale ``v`` to unit Euclidean length along ``axis``.

    Works on a single vector or on every row of a matrix. Raises
    DegenerateNorm when any norm is at or below ``EPS_NORM``.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm <= EPS_NORM):
        raise DegenerateNorm("cannot normalize a vector of (near) zero length")
    return v / norm


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def cosine_distance(u, v):
    """``1 - cos(u, v)``, a value in [0, 2]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeMismatch(f"shape mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= EPS_NORM or nv <= EPS_NORM:
        raise DegenerateNorm("cosine distance of a zero-length vector")
    cos = float(np.dot(u, v) / (nu * nv))
    return 1.0 - min(1.0, max(-1.0, cos))


def pairwise_cosine_distance(a, b):
    """Distance matrix between the rows of ``a`` and ``b``."""
    a = l2_normalize(a)
    b = l2_normalize(b)
    return 1.0 - a @ b.T


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (any array shape).

    ``x`` is not modified; each coordinate is perturbed on a private copy.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    """Norm-wise relative error ``|a - n| / max(|a| + |n|, tiny)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom < 1e-300:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
