"""Synthetic cross-domain experiment: train on one domain with the softmax
baseline and with the AM-Softmax identity loss, then compare retrieval and
centroid separation on a domain never seen in training.
"""

import csv
import os
import time
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from . import evalkit
from .config import load_config, train_config
from .data import gen_synthetic, make_domain_specs, split_query_gallery
from .layers import Model
from .numkit import spawn_rngs
from .trainer import embed, evaluate_model, train

DATA_STREAM = 2
EVAL_STREAM = 3


def committed_config_path():
    return str(resources.files("reidmetric") / "configs" / "cross_domain.ini")


@dataclass
class SyntheticDomain:
    name: str
    full: object
    query: object
    gallery: object
    spec: object


def synthetic_from_config(cfg):
    """Domains described by the ``[data]`` section, each with its query/gallery split."""
    d = cfg["data"]
    spec_rng, data_rng, split_rng = spawn_rngs(cfg["run"]["seed"], 3, stream=DATA_STREAM)
    specs = make_domain_specs(
        d["num_domains"], d["num_ids"], d["samples_per_id"], d["latent_dim"], d["sigma_w"],
        d["num_cameras"], d["shift"], d["offset"], spec_rng,
    )
    datasets = gen_synthetic(specs, d["shared_prototypes"], data_rng)
    out = []
    for spec, ds in zip(specs, datasets):
        q, g = split_query_gallery(ds, split_rng, cfg["eval"]["query_fraction"])
        out.append(SyntheticDomain(spec.name, ds, q, g, spec))
    return out


def centroid_stat(model, params, dataset, cfg, return_pairs=False):
    ev = cfg["eval"]
    emb = embed(model, params, dataset.payloads())
    counts = np.bincount(dataset.person_ids)
    eligible = int(np.sum(counts >= ev["centroid_min_images"]))
    num_ids = min(ev["centroid_num_ids"], eligible)
    (rng,) = spawn_rngs(cfg["run"]["seed"], 1, stream=EVAL_STREAM)
    return evalkit.centroid_separation(
        emb, dataset.person_ids, num_ids, ev["centroid_min_images"], rng, return_pairs=return_pairs
    )


def cross_domain(cfg=None, out_dir=None, kinds=("softmax", "amsoftmax")):
    """Run the experiment; returns ``{kind: {metric: value}}``.

    Domain 0 is the training (source) domain, the last domain is the unseen
    target. Both models share the seed, schedule and data.
    """
    if cfg is None:
        cfg = load_config(committed_config_path())
    domains = synthetic_from_config(cfg)
    source, target = domains[0], domains[-1]
    base = train_config(cfg)
    results, curves, pair_dists = {}, {}, {}
    for kind in kinds:
        t0 = time.perf_counter()
        tc = replace(base, loss_kind=kind)
        res = train(tc, source.full)
        model = Model(res.config)
        tgt = evaluate_model(model, res.params, target.query, target.gallery, tc.max_k)
        src = evaluate_model(model, res.params, source.query, source.gallery, tc.max_k)
        cent, pairs, _ = centroid_stat(model, res.params, target.full, cfg, return_pairs=True)
        results[kind] = {
            "rank1": tgt.rank1,
            "mAP": tgt.mAP,
            "centroid": cent,
            "source_rank1": src.rank1,
            "source_mAP": src.mAP,
            "final_loss": res.log.entries[-1].loss,
            "seconds": time.perf_counter() - t0,
        }
        curves[kind] = tgt.cmc
        pair_dists[kind] = pairs
    if out_dir:
        write_cross_domain_report(out_dir, results, curves, pair_dists)
    return results


def write_cross_domain_report(out_dir, results, curves, pair_dists):
    from . import plotting

    os.makedirs(out_dir, exist_ok=True)
    keys = ["rank1", "mAP", "centroid", "source_rank1", "source_mAP", "final_loss"]
    with open(os.path.join(out_dir, "cross_domain.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loss"] + keys)
        for kind, row in results.items():
            w.writerow([kind] + [f"{row[k]:.6f}" for k in keys])
    plotting.plot_cmc(curves, os.path.join(out_dir, "cmc_unseen.png"), title="unseen domain CMC")
    plotting.plot_centroid_distances(pair_dists, os.path.join(out_dir, "centroid_distances.png"))
    plotting.plot_comparison(results, os.path.join(out_dir, "comparison.png"))
