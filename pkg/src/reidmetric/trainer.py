"""Training loop: identity-balanced batches, augmentation, forward, identity
loss, backward and AMSGrad with the step schedule and warm-up freezing.
"""

import logging
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import evalkit
from .data import AugmentConfig, augment, augment_batch
from .errors import ConfigError, ConfigMismatch, NonFiniteLoss
from .layers import CLASSIFIER, Model, ModelConfig, load_checkpoint, save_checkpoint
from .losses import LOSS_KINDS, LossConfig, compute_loss, uses_prehead
from .numkit import spawn_rngs
from .optim import OptimConfig, Schedule, lr_at_epoch, trainable_groups
from .sampler import SamplerConfig, plan_epoch

log = logging.getLogger(__name__)

TRAIN_STREAM = 1


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    loss_kind: str = "amsoftmax"
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: Schedule = field(default_factory=Schedule)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    eval_every: int = 0
    max_k: int = 50

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}")

    @property
    def epochs(self):
        return self.schedule.total_epochs


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    seconds: float
    mAP: float = None
    rank1: float = None

    def line(self):
        cols = [str(self.epoch), repr(self.loss), repr(self.lr), f"{self.seconds:.3f}"]
        if self.mAP is not None:
            cols += [repr(self.mAP), repr(self.rank1)]
        return ",".join(cols)


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)

    def lines(self):
        return [e.line() for e in self.entries]

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in self.lines()))


@dataclass
class TrainResult:
    config: ModelConfig
    params: dict
    log: TrainLog
    class_ids: list
    best_mAP: float = None


def resolve_model_config(config, dataset):
    """Take the input shape and class count from the training data."""
    shape = tuple(np.shape(dataset.records[0].load()))
    return replace(config.model, input_shape=shape, num_classes=len(dataset.identities))


def embed(model, params, payloads, batch_size=256):
    """Eval-mode embeddings, row order preserved."""
    payloads = np.asarray(payloads, dtype=np.float64)
    out = []
    t0 = time.perf_counter()
    for start in range(0, payloads.shape[0], batch_size):
        emb, _ = model.forward(params, payloads[start:start + batch_size], "eval")
        out.append(emb)
    elapsed = time.perf_counter() - t0
    if elapsed > 0:
        log.debug("embedded %d samples at %.0f samples/s", payloads.shape[0], payloads.shape[0] / elapsed)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.embed_dim))


def evaluate_model(model, params, query, gallery, max_k=50):
    q = embed(model, params, query.payloads())
    g = embed(model, params, gallery.payloads())
    return evalkit.evaluate(q, query.person_ids, query.camera_ids, g, gallery.person_ids, gallery.camera_ids, max_k)


def _augmented_batch(records, payloads, idx, cfg, rng):
    if payloads.ndim == 2:
        return augment_batch(payloads[idx], cfg, rng)
    return np.stack([augment(records[i], cfg, rng).payload for i in idx])


def train(config, dataset, query=None, gallery=None, out_dir=None, initial_params=None):
    """Train a model on ``dataset``; returns a TrainResult.

    With ``out_dir`` set, ``last.ckpt`` is rewritten after every epoch,
    ``best.ckpt`` whenever the evaluated mAP improves, and ``train_log.csv``
    holds one ``epoch,loss,lr,seconds[,mAP,rank1]`` line per epoch.
    """
    if len(dataset.identities) < 2:
        raise ConfigError("training needs at least two identities")
    mcfg = resolve_model_config(config, dataset)
    model = Model(mcfg)
    init_rng, sample_rng, aug_rng, drop_rng = spawn_rngs(config.seed, 4, stream=TRAIN_STREAM)
    params = model.init_params(init_rng) if initial_params is None else {
        k: np.array(v, dtype=np.float64, copy=True) for k, v in initial_params.items()
    }
    class_ids = dataset.identities
    to_class = {pid: c for c, pid in enumerate(class_ids)}
    labels = np.array([to_class[p] for p in dataset.person_ids.tolist()])
    payloads = dataset.payloads()
    opt = config.optim.build()
    sc = config.sampler
    train_log = TrainLog()
    best = -math.inf
    meta = {"loss_kind": config.loss_kind, "class_ids": [int(c) for c in class_ids], "seed": config.seed}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(config.schedule, epoch)
        names = trainable_groups(config.schedule, epoch, model)
        losses = []
        for plan in plan_epoch(labels, sc.P, sc.K, sc.batch_size, sample_rng):
            idx = np.array(plan.indices)
            x = _augmented_batch(dataset.records, payloads, idx, config.augment, aug_rng)
            emb, cache = model.forward(params, x, "train", drop_rng)
            prehead = uses_prehead(config.loss_kind)
            feats = model.prehead_features(cache) if prehead else emb
            out = compute_loss(config.loss_kind, feats, labels[idx], params[CLASSIFIER], config.loss)
            if not math.isfinite(out.loss):
                raise NonFiniteLoss(
                    f"non-finite loss {out.loss} at epoch {epoch}, batch {len(losses)} (lr={lr})"
                )
            grads, _ = model.backward(params, cache, out.grad_embeddings, skip_head=prehead)
            grads[CLASSIFIER] = out.grad_W
            if lr > 0:
                opt.step(params, grads, lr, names)
            losses.append(out.loss)
        entry = EpochLog(epoch, float(np.mean(losses)), lr, 0.0)
        evaluate_now = query is not None and gallery is not None and (
            epoch == config.epochs - 1 or (config.eval_every and (epoch + 1) % config.eval_every == 0)
        )
        if evaluate_now:
            res = evaluate_model(model, params, query, gallery, config.max_k)
            entry.mAP, entry.rank1 = res.mAP, res.rank1
        entry.seconds = time.perf_counter() - t0
        train_log.entries.append(entry)
        log.info("%s", entry.line())
        if out_dir:
            meta_e = dict(meta, epoch=epoch)
            save_checkpoint(os.path.join(out_dir, "last.ckpt"), mcfg, params, meta_e)
            if entry.mAP is not None and entry.mAP > best:
                best = entry.mAP
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), mcfg, params, meta_e)
            train_log.write(os.path.join(out_dir, "train_log.csv"))
    return TrainResult(mcfg, params, train_log, class_ids, None if best == -math.inf else best)


def evaluate_checkpoint(path, query, gallery, max_k=50):
    mcfg, params, _ = load_checkpoint(path)
    for ds in (query, gallery):
        shape = tuple(np.shape(ds.records[0].load()))
        if shape != mcfg.input_shape:
            raise ConfigMismatch(f"payload shape {shape} does not match checkpoint input {mcfg.input_shape}")
    return evaluate_model(Model(mcfg), params, query, gallery, max_k)
