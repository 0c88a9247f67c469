"""``reidmetric`` command line: generate, train, embed, eval, centroids,
gradcheck and crossdomain.

Exit codes: 0 success, 1 gradient check failure or unexpected error,
2 configuration error, 3 data or I/O error, 4 non-finite training loss.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import evalkit
from .config import SEED_ENV, dump_config, load_config, train_config
from .embdump import read_dump, write_dump
from .errors import (
    ConfigError,
    ConfigMismatch,
    DataError,
    DimMismatch,
    InsufficientIdentities,
    NonFiniteLoss,
    ReidMetricError,
)
from .layers import Model, load_checkpoint

log = logging.getLogger("reidmetric")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
GRADCHECK_THRESHOLD = 1e-4


def _exit_code(exc):
    if isinstance(exc, NonFiniteLoss):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, ConfigMismatch)):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, DimMismatch, InsufficientIdentities, OSError)):
        return EXIT_DATA
    return EXIT_FAIL


def _load_cfg(args):
    cfg = load_config(args.config, overrides=args.set or ())
    if getattr(args, "seed", None) is not None and not os.environ.get(SEED_ENV, "").strip():
        cfg["run"]["seed"] = args.seed
    return cfg


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# generate


def _spec_json(spec):
    return {
        "name": spec.name,
        "num_ids": spec.num_ids,
        "samples_per_id": spec.samples_per_id,
        "latent_dim": spec.latent_dim,
        "sigma_w": spec.sigma_w,
        "num_cameras": spec.num_cameras,
        "A": spec.A.tolist(),
        "b": spec.b.tolist(),
    }


def cmd_generate(args):
    from .data import write_manifest
    from .experiments import synthetic_from_config

    cfg = _load_cfg(args)
    out = args.out
    os.makedirs(out, exist_ok=True)
    domains = synthetic_from_config(cfg)
    for dom in domains:
        ddir = os.path.join(out, dom.name)
        os.makedirs(ddir, exist_ok=True)
        write_manifest(os.path.join(ddir, "manifest.csv"), dom.full)
        write_manifest(os.path.join(ddir, "query.csv"), dom.query)
        write_manifest(os.path.join(ddir, "gallery.csv"), dom.gallery)
        print(f"{dom.name},{len(dom.full)},{len(dom.query)},{len(dom.gallery)}")
    prov = {
        "seed": cfg["run"]["seed"],
        "config": dump_config(cfg),
        "domains": [_spec_json(d.spec) for d in domains],
    }
    with open(os.path.join(out, "provenance.json"), "w", encoding="utf-8") as fh:
        json.dump(prov, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _rescaled_drops(drops, old_total, new_total):
    scaled = sorted({round(d * new_total / old_total) for d in drops})
    return tuple(d for d in scaled if 0 < d < new_total)


def cmd_train(args):
    from dataclasses import replace

    from .data import load_manifest
    from .plotting import plot_training_curve
    from .trainer import train

    cfg = _load_cfg(args)
    if args.loss:
        cfg["loss"]["kind"] = args.loss
    if args.epochs:
        sc = cfg["schedule"]
        if sc["drop_epochs"] and sc["drop_epochs"][-1] >= args.epochs:
            sc["drop_epochs"] = _rescaled_drops(sc["drop_epochs"], sc["epochs"], args.epochs)
        sc["epochs"] = args.epochs
        sc["warmup_epochs"] = min(sc["warmup_epochs"], args.epochs)
    manifest = args.train or cfg["data"]["train_manifest"]
    if not manifest:
        raise DataError("no training manifest: set data.train_manifest or pass --train")
    tc = train_config(cfg)
    train_ds = load_manifest(manifest, role="train")
    query = gallery = None
    qpath, gpath = cfg["eval"]["query_manifest"], cfg["eval"]["gallery_manifest"]
    if qpath and gpath:
        query, gallery = load_manifest(qpath, role="query"), load_manifest(gpath, role="gallery")
    out = args.out or cfg["run"]["out_dir"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    res = train(replace(tc), train_ds, query, gallery, out_dir=out)
    plot_training_curve(res.log.entries, os.path.join(out, "train_curve.png"))
    last = res.log.entries[-1]
    print(f"epochs,{len(res.log.entries)}")
    print(f"final_loss,{_fmt(last.loss)}")
    if last.mAP is not None:
        print(f"mAP,{_fmt(last.mAP)}")
        print(f"rank1,{_fmt(last.rank1)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# embed


def cmd_embed(args):
    from .data import load_manifest
    from .trainer import embed

    mcfg, params, _ = load_checkpoint(args.checkpoint)
    ds = load_manifest(args.manifest, role="embed")
    shape = tuple(np.shape(ds.records[0].load()))
    if shape != mcfg.input_shape:
        raise ConfigMismatch(f"payload shape {shape} does not match checkpoint input {mcfg.input_shape}")
    t0 = time.perf_counter()
    emb = embed(Model(mcfg), params, ds.payloads())
    rate = emb.shape[0] / max(time.perf_counter() - t0, 1e-9)
    log.info("embedded %d samples at %.0f embeddings/s", emb.shape[0], rate)
    write_dump(args.out, emb, ds.person_ids, ds.camera_ids)
    print(f"rows,{emb.shape[0]}")
    print(f"dim,{emb.shape[1]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def topk_rows(q, g, result, k):
    """``(query_row, rank, gallery_row, gallery_pid, match)`` for the first ``k`` valid gallery items."""
    rows = []
    dist = evalkit.cosine_distances(q.embeddings, g.embeddings)
    for qi in result.query_rows:
        order = np.argsort(dist[qi], kind="stable")
        keep = evalkit.valid_mask(q.person_ids[qi], q.camera_ids[qi], g.person_ids[order], g.camera_ids[order])
        for rank, gi in enumerate(order[keep][:k], start=1):
            rows.append((qi, rank, int(gi), int(g.person_ids[gi]), int(g.person_ids[gi] == q.person_ids[qi])))
    return rows


def cmd_eval(args):
    q, g = read_dump(args.query), read_dump(args.gallery)
    if q.dim != g.dim:
        raise DimMismatch(f"query dim {q.dim} != gallery dim {g.dim}")
    res = evalkit.evaluate(q.embeddings, q.person_ids, q.camera_ids, g.embeddings, g.person_ids,
                           g.camera_ids, args.max_k)
    metrics = [("mAP", res.mAP)] + [(f"rank{k}", res.rank(k)) for k in (1, 5, 10)]
    metrics.append(("valid_queries", res.num_valid_queries))
    for name, v in metrics:
        print(f"{name},{v if isinstance(v, int) else _fmt(v)}")
    topk = topk_rows(q, g, res, args.dump_topk) if args.dump_topk else None
    if args.report:
        from .plotting import plot_cmc

        rep = args.report
        os.makedirs(rep, exist_ok=True)
        _write_csv(os.path.join(rep, "metrics.csv"), ["metric", "value"],
                   [(n, v if isinstance(v, int) else repr(float(v))) for n, v in metrics])
        _write_csv(os.path.join(rep, "cmc.csv"), ["rank", "rate"],
                   [(i + 1, repr(float(v))) for i, v in enumerate(res.cmc)])
        _write_csv(os.path.join(rep, "per_query.csv"), ["query_row", "person_id", "ap", "first_match_rank"],
                   [(qi, int(q.person_ids[qi]), repr(ap), r)
                    for qi, ap, r in zip(res.query_rows, res.per_query_ap, res.first_match_rank)])
        if topk is not None:
            _write_csv(os.path.join(rep, "topk.csv"),
                       ["query_row", "rank", "gallery_row", "gallery_person_id", "match"], topk)
        plot_cmc({"model": res.cmc}, os.path.join(rep, "cmc.png"))
    elif topk is not None:
        print("query_row,rank,gallery_row,gallery_person_id,match")
        for row in topk:
            print(",".join(str(v) for v in row))
    return EXIT_OK


# ---------------------------------------------------------------------------
# centroids


def cmd_centroids(args):
    from .numkit import make_rng

    d = read_dump(args.dump)
    rng = make_rng(args.seed) if args.seed is not None else None
    stat, pairs, chosen = evalkit.centroid_separation(
        d.embeddings, d.person_ids, args.num_ids, args.min_images, rng, return_pairs=True
    )
    print(f"centroid_separation,{_fmt(stat)}")
    print(f"num_ids,{len(chosen)}")
    if args.figure:
        from .plotting import plot_centroid_distances

        plot_centroid_distances({"centroids": pairs}, args.figure)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    from .gradcheck import format_report, run_gradcheck

    report = run_gradcheck(args.seed, args.points, args.components or None, args.corrupt)
    for line in format_report(report, GRADCHECK_THRESHOLD):
        print(line)
    ok = all(err < GRADCHECK_THRESHOLD for err in report.values())
    print("gradcheck " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# crossdomain


def cmd_crossdomain(args):
    from .experiments import committed_config_path, cross_domain

    if args.config is None:
        args.config = committed_config_path()
    cfg = _load_cfg(args)
    res = cross_domain(cfg, out_dir=args.out)
    keys = ("rank1", "mAP", "centroid", "source_rank1", "source_mAP")
    print("loss," + ",".join(keys))
    for kind, row in res.items():
        print(kind + "," + ",".join(_fmt(row[k]) for k in keys))
    s, a = res["softmax"], res["amsoftmax"]
    print(f"delta_rank1,{_fmt(a['rank1'] - s['rank1'])}")
    print(f"delta_mAP,{_fmt(a['mAP'] - s['mAP'])}")
    print(f"centroid_ratio,{_fmt(a['centroid'] / s['centroid'])}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="reidmetric", description="Metric-learning re-ID toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int, help=f"run seed (the {SEED_ENV} variable takes precedence)")

    sp = sub.add_parser("generate", help="write synthetic domains as manifests and payload files")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train a model on a manifest")
    with_config(sp)
    sp.add_argument("--train", help="training manifest (overrides data.train_manifest)")
    sp.add_argument("--loss", choices=("amsoftmax", "softmax"))
    sp.add_argument("--epochs", type=int, help="epoch budget; drop epochs past it are rescaled")
    sp.add_argument("--out", help="output directory (default run.out_dir)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("embed", help="embed a manifest with a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("eval", help="evaluate query against gallery embedding dumps")
    sp.add_argument("--query", required=True)
    sp.add_argument("--gallery", required=True)
    sp.add_argument("--max-k", type=int, default=50)
    sp.add_argument("--report", help="directory for CSV reports and the CMC figure")
    sp.add_argument("--dump-topk", type=int, default=0, metavar="K", help="emit the top-K gallery items per query")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("centroids", help="mean pairwise cosine distance between identity centroids")
    sp.add_argument("--dump", required=True)
    sp.add_argument("--num-ids", type=int, default=200)
    sp.add_argument("--min-images", type=int, default=20)
    sp.add_argument("--seed", type=int, help="sample identities at random (default: first eligible)")
    sp.add_argument("--figure", help="write a histogram of the pairwise distances")
    sp.set_defaults(func=cmd_centroids)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--points", type=int, default=50)
    sp.add_argument("--components", nargs="*")
    sp.add_argument("--corrupt", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("crossdomain", help="softmax vs AM-Softmax on an unseen synthetic domain")
    with_config(sp)
    sp.add_argument("--out", help="directory for the CSV report and figures")
    sp.set_defaults(func=cmd_crossdomain)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ReidMetricError, OSError) as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
