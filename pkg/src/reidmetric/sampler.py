"""Identity-balanced P x K batch planning.

Each batch is built from P identities drawn uniformly without replacement,
K images each. An identity with fewer than K images contributes all of
them, and further identities are drawn until the batch is full. Batches
are sampled independently; an epoch has ``floor(n_samples / batch_size)``
of them.
"""

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyDataset, InfeasibleBatch


@dataclass(frozen=True)
class BatchPlan:
    indices: tuple
    identities_used: tuple  # ((person_id, count), ...) in draw order

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class SamplerConfig:
    P: int = 16
    K: int = 4
    batch_size: int = 64

    def __post_init__(self):
        if self.P < 1 or self.K < 1 or self.P * self.K != self.batch_size:
            raise ConfigError(f"need P*K == batch_size, got {self.P}*{self.K} != {self.batch_size}")


def _person_ids(dataset):
    if hasattr(dataset, "person_ids"):
        return np.asarray(dataset.person_ids)
    return np.asarray(dataset)


def index_by_identity(person_ids):
    groups = {}
    for idx, pid in enumerate(person_ids.tolist()):
        groups.setdefault(pid, []).append(idx)
    return {pid: np.array(groups[pid]) for pid in sorted(groups)}


def plan_batch(groups, ids, K, batch_size, rng):
    order = rng.permutation(len(ids))
    chosen, used = [], []
    for j in order:
        need = batch_size - len(chosen)
        if need == 0:
            break
        pid = ids[j]
        pool = groups[pid]
        take = min(K, len(pool), need)
        pick = rng.choice(pool, size=take, replace=False)
        chosen.extend(int(i) for i in pick)
        used.append((pid, take))
    if len(chosen) < batch_size:
        raise InfeasibleBatch("ran out of identities while filling a batch")
    return BatchPlan(tuple(chosen), tuple(used))


def plan_epoch(dataset, P, K, batch_size, rng):
    """Plan one epoch of batches over ``dataset`` (a Dataset or a sequence of person ids)."""
    SamplerConfig(P, K, batch_size)
    pids = _person_ids(dataset)
    if pids.size == 0:
        raise EmptyDataset("cannot plan batches over an empty dataset")
    groups = index_by_identity(pids)
    ids = list(groups)
    capacity = sum(min(K, len(g)) for g in groups.values())
    if capacity < batch_size:
        raise InfeasibleBatch(
            f"{len(ids)} identities hold at most {capacity} distinct samples under K={K}, "
            f"fewer than batch_size={batch_size}"
        )
    steps = pids.size // batch_size
    return [plan_batch(groups, ids, K, batch_size, rng) for _ in range(steps)]


def identity_frequency(plans, all_ids=()):
    """Number of batches each identity appears in; ``all_ids`` adds zero entries."""
    if not plans:
        raise ValueError("identity_frequency needs at least one plan")
    counts = Counter({pid: 0 for pid in all_ids})
    for plan in plans:
        for pid, _ in plan.identities_used:
            counts[pid] += 1
    return dict(sorted(counts.items()))
