"""Acceptance suite: one or more tests per criterion, each at its stated
tolerance. ``conftest.py`` prints a pass/fail line per criterion.

Run on its own with ``pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``.
"""

import os
import sys
import time

import numpy as np
import pytest

from reidmetric import evalkit as E
from reidmetric.cli import main
from reidmetric.data import Dataset, SampleRecord
from reidmetric.experiments import committed_config_path, cross_domain
from reidmetric.gradcheck import ALL_CHECKS, LAYER_CHECKS, LOSS_CHECKS, run_gradcheck
from reidmetric.layers import Model, ModelConfig
from reidmetric.losses import LossConfig, am_softmax, identity_loss, softmax_ce
from reidmetric.numkit import l2_normalize, make_rng
from reidmetric.optim import AMSGrad, Schedule, lr_at_epoch
from reidmetric.sampler import identity_frequency, plan_epoch
from reidmetric.trainer import TrainConfig, train

from oracles import brute_eval, random_instance

acceptance = pytest.mark.acceptance


# --------------------------------------------------------------------------- 1


@acceptance(1, "gradient suite: every layer and loss vs central differences")
def test_gradient_suite(record_property):
    t0 = time.perf_counter()
    report = run_gradcheck(seed=0, points=50)
    seconds = time.perf_counter() - t0
    worst = max(report.values())
    record_property("worst_rel_err", f"{worst:.2e}")
    record_property("seconds", f"{seconds:.1f}")
    assert set(LAYER_CHECKS) | set(LOSS_CHECKS) <= set(report) == set(ALL_CHECKS)
    assert all(err < 1e-5 for err in report.values()), report
    assert seconds < 60


# --------------------------------------------------------------------------- 2


@acceptance(2, "reduction identities: m = 0 gives softmax-CE, alpha = 0 gives AM-Softmax")
def test_reduction_identities(record_property):
    rng = make_rng(2)
    worst = 0.0
    for _ in range(100):
        B, N, M = (int(v) for v in rng.integers(1, 9, size=3) + 1)
        F = l2_normalize(rng.standard_normal((B, N)))
        W = rng.standard_normal((N, M)) * rng.uniform(0.1, 5.0)
        y = rng.integers(0, M, size=B)
        s = float(rng.uniform(1.0, 64.0))
        Wn = W / np.linalg.norm(W, axis=0, keepdims=True)
        ce, _ = softmax_ce(s * F @ Wn, y)
        am = am_softmax(F, y, W, LossConfig(s=s, m=0.0, alpha=0.0))
        worst = max(worst, abs(am.loss - ce))
        cfg = LossConfig(s=s, m=float(rng.uniform(0.0, 0.8)), alpha=0.0)
        a, b = am_softmax(F, y, W, cfg), identity_loss(F, y, W, cfg)
        assert a.loss == b.loss
        assert np.array_equal(a.grad_embeddings, b.grad_embeddings) and np.array_equal(a.grad_W, b.grad_W)
    record_property("worst_abs_diff", f"{worst:.1e}")
    assert worst <= 1e-12


# --------------------------------------------------------------------------- 3


@acceptance(3, "metric oracle: evaluate() equals brute force; AP hand cases")
def test_metric_oracle(record_property):
    rng = make_rng(3)
    worst = 0.0
    for _ in range(20):
        inst = random_instance(rng)
        assert inst[0].shape[0] <= 50 and inst[3].shape[0] <= 200
        res = E.evaluate(*inst, max_k=20)
        mAP, cmc, aps, valid = brute_eval(*[a.tolist() for a in inst], max_k=20)
        assert res.query_rows == valid
        worst = max(worst, abs(res.mAP - mAP), float(np.max(np.abs(res.cmc - np.array(cmc)))),
                    float(np.max(np.abs(np.array(res.per_query_ap) - aps), initial=0.0)))
    record_property("worst_abs_diff", f"{worst:.1e}")
    assert worst <= 1e-12
    assert abs(E.average_precision([1, 0, 1]) - 5 / 6) <= 1e-12
    for r in range(1, 11):
        flags = [0] * 12
        flags[r - 1] = 1
        assert abs(E.average_precision(flags) - 1 / r) <= 1e-12


# --------------------------------------------------------------------------- 4


@acceptance(4, "optimizer oracle: single AMSGrad step and running-max monotonicity")
def test_optimizer_oracle(record_property):
    opt = AMSGrad(beta1=0.9, beta2=0.999, eps=1e-8, bias_correction=False)
    p = {"theta": np.zeros(1)}
    opt.step(p, {"theta": np.ones(1)}, 0.0015)
    delta = float(p["theta"][0])
    hand = -0.0015 * 0.1 / (0.001 ** 0.5 + 1e-8)
    record_property("delta_theta", f"{delta:.7e}")
    assert abs(delta - hand) <= 1e-9
    assert round(delta, 7) == -4.7434e-3

    rng = make_rng(4)
    opt = AMSGrad()
    q = {"w": rng.standard_normal((4, 3)), "b": rng.standard_normal(3)}
    prev = {k: np.zeros_like(v) for k, v in q.items()}
    for _ in range(10 ** 4):
        scale = float(np.exp(rng.uniform(-6, 3)))
        opt.step(q, {k: rng.standard_normal(v.shape) * scale for k, v in q.items()}, 1e-3)
        for k in q:
            assert np.all(opt.v_max[k] >= prev[k])
            assert np.all(opt.v_max[k] >= opt.v[k])
            prev[k] = opt.v_max[k].copy()


# --------------------------------------------------------------------------- 5


@acceptance(5, "schedule fidelity: lr values and bit-exact warm-up freeze")
def test_schedule_values():
    s = Schedule()
    assert (s.base_lr, s.drop_epochs, s.total_epochs, s.warmup_epochs) == (0.0015, (40, 50), 65, 5)
    assert lr_at_epoch(s, 0) == 0.0015
    assert lr_at_epoch(s, 45) == 0.00015
    assert lr_at_epoch(s, 55) == 0.000015


def _warmup_domain():
    rng = make_rng(50)
    centres = rng.standard_normal((16, 10)) * 2
    recs = [SampleRecord(centres[i] + 0.3 * rng.standard_normal(10), i, j % 3)
            for i in range(16) for j in range(8)]
    return Dataset(recs)


@acceptance(5, "schedule fidelity: lr values and bit-exact warm-up freeze")
def test_warmup_freeze_epochs_0_to_4():
    ds = _warmup_domain()
    mcfg = ModelConfig(input_shape=(10,), hidden=(32,), embed_dim=16, num_classes=16)
    model = Model(mcfg)
    init = model.init_params(make_rng(51))
    head = model.head_param_names()
    backbone = [k for k in init if k not in head]
    assert backbone

    def run(epochs):
        cfg = TrainConfig(model=ModelConfig(hidden=(32,), embed_dim=16),
                          schedule=Schedule(total_epochs=epochs, drop_epochs=(), warmup_epochs=5), seed=5)
        return train(cfg, ds, initial_params=init).params

    # training is deterministic, so a k-epoch run is the state after epoch k - 1
    for epochs in range(1, 6):
        params = run(epochs)
        assert all(np.array_equal(params[k], init[k]) for k in backbone), epochs
        assert any(not np.array_equal(params[k], init[k]) for k in head), epochs
    params = run(6)
    assert any(not np.array_equal(params[k], init[k]) for k in backbone)


# --------------------------------------------------------------------------- 6


@acceptance(6, "sampler: batch composition, identity uniformity, padding rule")
def test_sampler_properties(record_property):
    pids = np.repeat(np.arange(100), 20)
    rng = make_rng(6)
    plans = [plan for _ in range(500) for plan in plan_epoch(pids, 16, 4, 64, rng)]
    assert len(plans) >= 10 ** 4
    for plan in plans[:10 ** 4]:
        idx = np.asarray(plan.indices)
        counts = np.bincount(pids[idx])
        assert idx.size == 64 and np.unique(idx).size == 64
        assert np.count_nonzero(counts) >= 16 and counts.max() <= 4
    freq = np.array(list(identity_frequency(plans, range(100)).values()), dtype=float)
    cv = freq.std() / freq.mean()
    record_property("batches", len(plans))
    record_property("cv", f"{cv:.4f}")
    assert cv < 0.05


@acceptance(6, "sampler: batch composition, identity uniformity, padding rule")
def test_sampler_padding_rule():
    # identities 0..4 hold two images each, the rest ten
    pids = np.concatenate([np.repeat(np.arange(5), 2), np.repeat(np.arange(5, 40), 10)])
    rng = make_rng(7)
    small_seen = 0
    for _ in range(300):
        for plan in plan_epoch(pids, 16, 4, 64, rng):
            idx = np.asarray(plan.indices)
            assert idx.size == 64 and np.unique(idx).size == 64
            counts = np.bincount(pids[idx], minlength=40)
            assert counts.max() <= 4
            used = plan.identities_used
            sizes = [min(4, 2 if pid < 5 else 10) for pid, _ in used]
            for (pid, c), full in zip(used[:-1], sizes[:-1]):
                # every drawn identity gives min(K, its images); only the last may be trimmed
                assert c == full == counts[pid]
                small_seen += pid < 5
            assert 0 < used[-1][1] <= sizes[-1]
            # extra identities are drawn only while slots remain
            assert len(used) >= 16 and sum(c for _, c in used[:-1]) < 64
    assert small_seen > 0


# --------------------------------------------------------------------------- 7


@acceptance(7, "cross-domain: AM-Softmax beats softmax on the unseen domain")
def test_cross_domain(record_property, tmp_path):
    t0 = time.perf_counter()
    res = cross_domain(out_dir=tmp_path)
    seconds = time.perf_counter() - t0
    s, a = res["softmax"], res["amsoftmax"]
    d_r1, d_map, ratio = a["rank1"] - s["rank1"], a["mAP"] - s["mAP"], a["centroid"] / s["centroid"]
    record_property("delta_rank1", f"{d_r1:+.4f}")
    record_property("delta_mAP", f"{d_map:+.4f}")
    record_property("centroid_ratio", f"{ratio:.3f}")
    record_property("seconds", f"{seconds:.1f}")
    assert d_r1 >= 0.02
    assert d_map > 0
    assert ratio >= 1.5
    assert seconds < 300


def test_committed_config_meets_minimums():
    from reidmetric.config import load_config

    cfg = load_config(committed_config_path(), env={})
    d = cfg["data"]
    assert d["num_domains"] >= 2 and d["num_ids"] >= 100 and d["samples_per_id"] >= 20
    assert d["shared_prototypes"] and cfg["model"]["arch"] == "vector"
    assert cfg["schedule"]["epochs"] == 65
    assert (cfg["loss"]["s"], cfg["loss"]["m"], cfg["loss"]["alpha"]) == (30.0, 0.35, 0.3)


# --------------------------------------------------------------------------- 8


def _pipeline(root, capsys):
    cfg = committed_config_path()
    data, run = os.path.join(root, "data"), os.path.join(root, "run")
    steps = [
        ["generate", "--config", cfg, "--seed", "8", "--out", data],
        ["train", "--config", cfg, "--seed", "8", "--train", os.path.join(data, "domain0", "manifest.csv"),
         "--out", run],
    ]
    for part in ("query", "gallery"):
        steps.append(["embed", "--checkpoint", os.path.join(run, "last.ckpt"),
                      "--manifest", os.path.join(data, "domain1", f"{part}.csv"),
                      "--out", os.path.join(root, f"{part}.emb")])
    steps.append(["eval", "--query", os.path.join(root, "query.emb"), "--gallery", os.path.join(root, "gallery.emb"),
                  "--report", os.path.join(root, "report"), "--dump-topk", "10"])
    outputs = []
    for argv in steps:
        assert main(argv) == 0, argv
        outputs.append(capsys.readouterr().out)
    return outputs


def _files(root, skip=()):
    found = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            rel = os.path.relpath(os.path.join(dirpath, f), root)
            if rel not in skip:
                found[rel] = open(os.path.join(dirpath, f), "rb").read()
    return found


@acceptance(8, "determinism: generate, train, embed, eval twice gives identical bytes")
def test_pipeline_determinism(tmp_path, capsys, record_property):
    a = _pipeline(tmp_path / "a", capsys)
    b = _pipeline(tmp_path / "b", capsys)
    # the train log carries wall-clock seconds, so it is compared without them
    fa, fb = _files(tmp_path / "a", {"run/train_log.csv"}), _files(tmp_path / "b", {"run/train_log.csv"})
    assert sorted(fa) == sorted(fb)
    for key in ("query.emb", "query.emb.csv", "gallery.emb", "gallery.emb.csv", "report/metrics.csv",
                "report/cmc.csv", "report/per_query.csv", "report/topk.csv", "run/last.ckpt"):
        assert key in fa
    differing = [k for k in fa if fa[k] != fb[k]]
    assert differing == []
    assert a[-1] == b[-1]
    strip = lambda p: [ln.split(",")[:2] + ln.split(",")[4:] for ln in open(p).read().splitlines()]  # noqa: E731
    assert strip(tmp_path / "a" / "run" / "train_log.csv") == strip(tmp_path / "b" / "run" / "train_log.csv")
    record_property("files_compared", len(fa))


# --------------------------------------------------------------------------- 9


@acceptance(9, "identity loss is non-negative; clamped inputs have zero gradients")
def test_identity_loss_non_negative(record_property):
    rng = make_rng(9)
    clamped = active = 0
    for _ in range(10 ** 5):
        B, N, M = int(rng.integers(1, 6)), int(rng.integers(2, 7)), int(rng.integers(2, 7))
        F = l2_normalize(rng.standard_normal((B, N)))
        W = rng.standard_normal((N, M)) * float(np.exp(rng.uniform(-3, 3)))
        y = rng.integers(0, M, size=B)
        cfg = LossConfig(s=float(rng.uniform(0.5, 64.0)), m=float(rng.uniform(0.0, 0.95)),
                         alpha=float(rng.uniform(0.0, 3.0)))
        out = identity_loss(F, y, W, cfg)
        assert out.loss >= 0.0
        if out.loss == 0.0:
            clamped += 1
            assert not np.any(out.grad_embeddings) and not np.any(out.grad_W)
        else:
            active += 1
    record_property("clamped", clamped)
    record_property("active", active)
    assert clamped > 1000 and active > 1000


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
