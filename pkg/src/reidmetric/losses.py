"""Identity objectives with analytic gradients.

``am_softmax`` scores each embedding against L2-normalized class
prototypes, subtracts an additive margin from the true-class cosine and
applies a scaled softmax cross-entropy. ``identity_loss`` relaxes it by
subtracting the prediction entropy and clamping at zero. ``softmax_ce`` is
the plain cross-entropy baseline.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateNorm, LabelOutOfRange, ShapeMismatch
from .numkit import EPS_NORM, log_softmax


@dataclass(frozen=True)
class LossConfig:
    s: float = 30.0
    m: float = 0.35
    alpha: float = 0.3
    reduction: str = "mean"

    def __post_init__(self):
        if not self.s > 0:
            raise ConfigError("scale s must be positive")
        if not 0 <= self.m < 1:
            raise ConfigError("margin m must lie in [0, 1)")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")


@dataclass
class LossOutput:
    loss: float
    probs: np.ndarray
    grad_embeddings: np.ndarray
    grad_W: np.ndarray
    logits: np.ndarray = None


def _check_labels(labels, num_classes, batch):
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeMismatch(f"labels shape {labels.shape}, expected ({batch},)")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64)


def _reduce_scale(reduction, batch):
    return 1.0 / batch if reduction == "mean" else 1.0


def softmax_ce(logits, labels, reduction="mean"):
    """Cross-entropy of row-wise softmax. Returns ``(loss, grad_logits)``."""
    z = np.asarray(logits, dtype=np.float64)
    B, M = z.shape
    y = _check_labels(labels, M, B)
    logp = log_softmax(z)
    rows = np.arange(B)
    c = _reduce_scale(reduction, B)
    loss = -c * float(np.sum(logp[rows, y]))
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return loss, grad * c


def _normalized_prototypes(W_raw):
    W_raw = np.asarray(W_raw, dtype=np.float64)
    norms = np.linalg.norm(W_raw, axis=0)
    if np.any(norms <= EPS_NORM):
        raise DegenerateNorm("classifier has a zero prototype column")
    return W_raw / norms, norms


def _margin_logits(F, labels, W_raw, cfg):
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or W_raw.ndim != 2 or F.shape[1] != W_raw.shape[0]:
        raise ShapeMismatch(f"embeddings {F.shape} vs prototypes {np.shape(W_raw)}")
    B = F.shape[0]
    y = _check_labels(labels, W_raw.shape[1], B)
    Wn, norms = _normalized_prototypes(W_raw)
    cos = F @ Wn
    logits = cfg.s * cos
    logits[np.arange(B), y] -= cfg.s * cfg.m
    return F, y, Wn, norms, logits


def _backprop_logits(F, Wn, norms, grad_logits, s):
    grad_cos = s * grad_logits
    grad_F = grad_cos @ Wn.T
    grad_Wn = F.T @ grad_cos
    # through column normalization: (I - w w^T) / |w| per column
    grad_W = (grad_Wn - Wn * np.sum(Wn * grad_Wn, axis=0, keepdims=True)) / norms
    return grad_F, grad_W


def am_softmax(embeddings, labels, W_raw, cfg=LossConfig()):
    """Additive-margin softmax loss.

    ``logit[i, j] = s * (cos(f_i, W_j) - m * [j == y_i])``, loss is the
    (mean or summed) negative log-probability of the true class. The margin
    is only applied to the true class; columns of ``W_raw`` are normalized
    internally and gradients flow through that normalization.
    """
    W_raw = np.asarray(W_raw, dtype=np.float64)
    F, y, Wn, norms, logits = _margin_logits(embeddings, labels, W_raw, cfg)
    loss, grad_logits = softmax_ce(logits, y, cfg.reduction)
    probs = np.exp(log_softmax(logits))
    grad_F, grad_W = _backprop_logits(F, Wn, norms, grad_logits, cfg.s)
    return LossOutput(loss, probs, grad_F, grad_W, logits)


def identity_loss(embeddings, labels, W_raw, cfg=LossConfig()):
    """``max(0, L_ASM - alpha * H(p))`` with per-sample entropy ``H``.

    The entropy uses the same margin-adjusted probabilities as the AM-Softmax
    term and shares its batch reduction. When the hinge clamps, the loss and
    every gradient are exactly zero.
    """
    W_raw = np.asarray(W_raw, dtype=np.float64)
    F, y, Wn, norms, logits = _margin_logits(embeddings, labels, W_raw, cfg)
    B = F.shape[0]
    c = _reduce_scale(cfg.reduction, B)
    logp = log_softmax(logits)
    p = np.exp(logp)
    rows = np.arange(B)
    l_asm = -c * float(np.sum(logp[rows, y]))
    ent = -np.sum(p * logp, axis=1)
    total = l_asm - cfg.alpha * c * float(np.sum(ent))
    if total <= 0.0:
        return LossOutput(0.0, p, np.zeros_like(F), np.zeros_like(W_raw), logits)
    grad_logits = p.copy()
    grad_logits[rows, y] -= 1.0
    # dH/dz_k = -p_k (log p_k + H)
    grad_logits += cfg.alpha * p * (logp + ent[:, None])
    grad_logits *= c
    grad_F, grad_W = _backprop_logits(F, Wn, norms, grad_logits, cfg.s)
    return LossOutput(total, p, grad_F, grad_W, logits)


def linear_softmax_ce(embeddings, labels, W, reduction="mean"):
    """Softmax cross-entropy on plain linear logits ``F @ W``.

    This is the classifier of the softmax baseline, which the trainer feeds
    with the features before L2 normalization. Returns a LossOutput like the
    metric-learning losses.
    """
    F = np.asarray(embeddings, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if F.ndim != 2 or W.ndim != 2 or F.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"embeddings {F.shape} vs classifier {W.shape}")
    logits = F @ W
    loss, grad_logits = softmax_ce(logits, labels, reduction)
    probs = np.exp(log_softmax(logits))
    return LossOutput(loss, probs, grad_logits @ W.T, F.T @ grad_logits, logits)


LOSS_KINDS = ("amsoftmax", "softmax")


def uses_prehead(kind):
    """Whether the loss consumes features before the L2-normalization head."""
    return kind == "softmax"


def compute_loss(kind, embeddings, labels, W, cfg):
    if kind == "amsoftmax":
        return identity_loss(embeddings, labels, W, cfg)
    if kind == "softmax":
        return linear_softmax_ce(embeddings, labels, W, cfg.reduction)
    raise ConfigError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
