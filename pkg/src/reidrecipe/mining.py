"""Hard triplet mining over a periodically refreshed pool of embeddings.

The pool caches embeddings of ``N`` random training images.  A query is
drawn uniformly among pool rows that have a positive; a triplet is then
drawn uniformly among that query's ``T`` highest-loss triplets.  Losses
between refreshes come from the cached (stale) embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ValidationError
from .model import embed_array
from .ndtensor import DEFAULT_MARGIN

DEFAULT_TOP_T = 25
DEFAULT_REFRESH_K = 16
DEFAULT_POOL_SIZE = 256


@dataclass(frozen=True)
class MiningPool:
    sample_refs: np.ndarray  # indices into the training set
    embeddings: np.ndarray  # [N,D] unit-norm rows
    labels: np.ndarray
    refreshed_at_update: int = 0

    def __post_init__(self):
        n = len(self.sample_refs)
        if self.embeddings.shape[0] != n or len(self.labels) != n:
            raise ValidationError("pool arrays disagree in length")
        if not pool_is_valid(self.labels):
            raise ValidationError("pool needs >= 3 rows, >= 2 identities and one identity with >= 2 rows")
        norms = np.linalg.norm(self.embeddings.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1) > 1e-5):
            raise ValidationError("pool embeddings must be unit-norm")

    def __len__(self):
        return len(self.sample_refs)

    def eligible_queries(self):
        _, inverse, counts = np.unique(self.labels, return_inverse=True, return_counts=True)
        return np.flatnonzero(counts[inverse] >= 2)


class Triplet(NamedTuple):
    query: int
    positive: int
    negative: int


def pool_is_valid(labels):
    labels = np.asarray(labels)
    if labels.size < 3:
        return False
    _, counts = np.unique(labels, return_counts=True)
    return counts.size >= 2 and counts.max() >= 2


def refresh_due(updates_since_refresh: int, k: int) -> bool:
    return updates_since_refresh >= k


def refresh_pool(model, images, labels, n, rng, update=0, max_redraws=100) -> MiningPool:
    """Embed ``n`` training images drawn without replacement.

    ``images`` are already at the evaluation transform (resized, no cut-out).
    """
    labels = np.asarray(labels)
    if n > len(images):
        raise ValidationError(f"pool size {n} exceeds training set size {len(images)}")
    for _ in range(max_redraws):
        refs = np.sort(rng.choice(len(images), size=n, replace=False))
        if pool_is_valid(labels[refs]):
            break
    else:
        raise ValidationError(f"no valid mining pool after {max_redraws} draws")
    emb = np.stack([embed_array(model, images[i]) for i in refs])
    return MiningPool(refs, emb, labels[refs].copy(), update)


def _candidates(pool, q_idx):
    label = pool.labels[q_idx]
    same = pool.labels == label
    pos = np.flatnonzero(same)
    pos = pos[pos != q_idx]
    neg = np.flatnonzero(~same)
    return pos, neg


def _loss_grid(pool, q_idx, pos, neg, m):
    # float64 similarities, same expression order as ndtensor.triplet_hinge
    e = pool.embeddings.astype(np.float64)
    q = e[q_idx]
    sp = np.array([q @ e[p] for p in pos])
    sn = np.array([q @ e[j] for j in neg])
    return np.maximum(0.0, (m + sn)[None, :] - sp[:, None])


def triplet_losses_for_query(pool: MiningPool, q_idx: int, m=DEFAULT_MARGIN):
    """All ``((pos, neg), loss)`` pairs for one query, in (pos, neg) order."""
    pos, neg = _candidates(pool, q_idx)
    if pos.size == 0:
        raise ValidationError(f"query row {q_idx} has no positive in the pool")
    grid = _loss_grid(pool, q_idx, pos, neg, m)
    return [((int(p), int(n)), float(grid[i, j]))
            for i, p in enumerate(pos) for j, n in enumerate(neg)]


def top_triplets(pool: MiningPool, q_idx: int, m=DEFAULT_MARGIN, t=DEFAULT_TOP_T):
    """The query's ``t`` largest-loss ``(pos, neg)`` pairs with their losses.

    Ties keep lexicographic ``(pos, neg)`` order.
    """
    pos, neg = _candidates(pool, q_idx)
    if pos.size == 0:
        raise ValidationError(f"query row {q_idx} has no positive in the pool")
    grid = _loss_grid(pool, q_idx, pos, neg, m).reshape(-1)
    order = np.argsort(-grid, kind="stable")[:t]
    pairs = [(int(pos[i // neg.size]), int(neg[i % neg.size])) for i in order]
    return pairs, grid[order]


def sample_hard_triplet(pool: MiningPool, m=DEFAULT_MARGIN, t=DEFAULT_TOP_T, rng=None) -> Triplet:
    eligible = pool.eligible_queries()
    q = int(eligible[rng.integers(eligible.size)])
    pairs, _ = top_triplets(pool, q, m, t)
    p, n = pairs[int(rng.integers(len(pairs)))]
    return Triplet(q, p, n)


def pool_mean_loss(pool: MiningPool, m=DEFAULT_MARGIN) -> float:
    """Mean triplet hinge over every valid triplet in the pool."""
    e = pool.embeddings.astype(np.float64)
    sims = e @ e.T
    total, count = 0.0, 0
    for q in pool.eligible_queries():
        same = pool.labels == pool.labels[q]
        pos = same.copy()
        pos[q] = False
        grid = np.maximum(0.0, m + sims[q, ~same][None, :] - sims[q, pos][:, None])
        total += grid.sum()
        count += grid.size
    return total / count
