"""Retrieval evaluation: cosine ranking, CMC, mAP with same-camera junk
removal, and the centroid-separation statistic.
"""

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import EmptyGallery, InsufficientIdentities, NoRelevant, ShapeMismatch
from .numkit import cosine_distance


@dataclass
class RankedList:
    indices: np.ndarray
    distances: np.ndarray
    valid: np.ndarray = None


@dataclass
class EvalResult:
    mAP: float
    cmc: np.ndarray
    per_query_ap: list
    num_valid_queries: int
    first_match_rank: list = field(default_factory=list)
    query_rows: list = field(default_factory=list)

    @property
    def rank1(self):
        return float(self.cmc[0]) if len(self.cmc) else 0.0

    def rank(self, k):
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def cosine_distances(query, gallery):
    """``1 - q . g`` for unit-norm rows."""
    return 1.0 - np.asarray(query, dtype=np.float64) @ np.asarray(gallery, dtype=np.float64).T


def rank_gallery(query_embedding, gallery):
    """Gallery indices by ascending cosine distance, ties by ascending index."""
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise EmptyGallery("gallery is empty")
    q = np.asarray(query_embedding, dtype=np.float64)
    if q.shape != (gallery.shape[1],):
        raise ShapeMismatch(f"query {q.shape} vs gallery dim {gallery.shape[1]}")
    d = 1.0 - gallery @ q
    order = np.argsort(d, kind="stable")
    return RankedList(order, d[order])


def valid_mask(query_pid, query_cam, gallery_pids, gallery_cams):
    """False for gallery entries sharing both identity and camera with the query."""
    gallery_pids = np.asarray(gallery_pids)
    gallery_cams = np.asarray(gallery_cams)
    return ~((gallery_pids == query_pid) & (gallery_cams == query_cam))


def average_precision(relevance):
    """Mean of precision@k over the ranks ``k`` holding a relevant item."""
    rel = np.asarray(relevance, dtype=bool)
    R = int(rel.sum())
    if R == 0:
        raise NoRelevant("no relevant item in the ranked list")
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float(np.sum(hits[rel] / ranks) / R)


def cmc(relevance_lists, max_k):
    """Fraction of queries whose first relevant item sits at rank <= k, k = 1..max_k."""
    firsts = []
    for rel in relevance_lists:
        rel = np.asarray(rel, dtype=bool)
        if rel.any():
            firsts.append(int(np.argmax(rel)))
    if not firsts:
        raise NoRelevant("no query has a relevant gallery item")
    curve = np.zeros(max_k)
    for f in firsts:
        if f < max_k:
            curve[f:] += 1
    return curve / len(firsts)


def evaluate(query_emb, query_pids, query_cams, gallery_emb, gallery_pids, gallery_cams, max_k=50):
    """Single-query re-ID evaluation.

    Same-identity same-camera gallery entries are dropped per query; queries
    left with no true match are skipped and excluded from every average.
    """
    query_emb = np.asarray(query_emb, dtype=np.float64)
    gallery_emb = np.asarray(gallery_emb, dtype=np.float64)
    if gallery_emb.ndim != 2 or gallery_emb.shape[0] == 0:
        raise EmptyGallery("gallery is empty")
    if query_emb.ndim != 2 or query_emb.shape[1] != gallery_emb.shape[1]:
        raise ShapeMismatch(f"query {query_emb.shape} vs gallery {gallery_emb.shape}")
    query_pids, query_cams = np.asarray(query_pids), np.asarray(query_cams)
    gallery_pids, gallery_cams = np.asarray(gallery_pids), np.asarray(gallery_cams)
    dist = cosine_distances(query_emb, gallery_emb)
    order = np.argsort(dist, axis=1, kind="stable")
    aps, firsts, rows, rel_lists = [], [], [], []
    for qi in range(query_emb.shape[0]):
        idx = order[qi]
        keep = valid_mask(query_pids[qi], query_cams[qi], gallery_pids[idx], gallery_cams[idx])
        rel = gallery_pids[idx][keep] == query_pids[qi]
        if not rel.any():
            continue
        aps.append(average_precision(rel))
        firsts.append(int(np.argmax(rel)) + 1)
        rows.append(qi)
        rel_lists.append(rel)
    if not aps:
        return EvalResult(0.0, np.zeros(max_k), [], 0, [], [])
    return EvalResult(float(np.mean(aps)), cmc(rel_lists, max_k), aps, len(aps), firsts, rows)


def centroid_separation(embeddings, person_ids, num_ids=200, min_images=20, rng=None, return_pairs=False):
    """Mean pairwise cosine distance between identity centroids.

    ``num_ids`` identities are drawn at random among those with at least
    ``min_images`` samples; each centroid is the mean of the identity's
    L2-normalized embeddings.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    person_ids = np.asarray(person_ids)
    ids, counts = np.unique(person_ids, return_counts=True)
    eligible = ids[counts >= min_images]
    if num_ids < 2 or eligible.size < num_ids:
        raise InsufficientIdentities(
            f"{eligible.size} identities have >= {min_images} samples; need {max(num_ids, 2)}"
        )
    if rng is None:
        chosen = eligible[:num_ids]
    else:
        chosen = np.sort(rng.choice(eligible, size=num_ids, replace=False))
    centroids = np.stack([emb[person_ids == pid].mean(axis=0) for pid in chosen])
    dists = [cosine_distance(centroids[a], centroids[b]) for a, b in combinations(range(num_ids), 2)]
    stat = float(np.mean(dists))
    if return_pairs:
        return stat, np.array(dists), chosen
    return stat
