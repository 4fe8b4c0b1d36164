"""Retrieval evaluation: mAP and CMC under the cross-camera protocol.

Gallery rows sharing both identity and camera with a query are dropped
before scoring; distractor rows are never relevant.  Rankings sort by
descending dot product, ties by ascending gallery position, and every
reduction runs sequentially in row order so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import resize_largest_side
from .errors import DegenerateVectorError, ValidationError
from .model import embed_array
from .ndtensor import NORM_EPS
from .synthdata import load_sample

ROLES = ("query", "gallery", "distractor")
QUERY, GALLERY, DISTRACTOR = 0, 1, 2


@dataclass(frozen=True)
class EmbeddingIndex:
    vectors: np.ndarray  # [count, dim] float32
    identities: np.ndarray
    cameras: np.ndarray
    roles: np.ndarray  # codes into ROLES

    def __post_init__(self):
        object.__setattr__(self, "vectors", np.asarray(self.vectors, dtype=np.float32))
        for name in ("identities", "cameras", "roles"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        n = self.vectors.shape[0]
        if self.vectors.ndim != 2 or self.dim < 2:
            raise ValidationError("index vectors must be [count, dim] with dim >= 2")
        if not (len(self.identities) == len(self.cameras) == len(self.roles) == n):
            raise ValidationError("index metadata lengths disagree")
        if np.any((self.roles < 0) | (self.roles > 2)):
            raise ValidationError("unknown role code in index")
        if np.any(self.identities[self.roles == DISTRACTOR] != -1):
            raise ValidationError("distractor rows must have identity -1")

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def count(self):
        return self.vectors.shape[0]

    def check_unit_norm(self, tol=1e-5):
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
        if bad.size:
            raise ValidationError(f"row {int(bad[0])} is not unit-norm (norm {norms[bad[0]]:.6f})")
        return self

    def rows(self, role):
        return np.flatnonzero(self.roles == role)

    def gallery_rows(self):
        return np.flatnonzero(self.roles != QUERY)

    def with_vectors(self, vectors):
        return EmbeddingIndex(vectors, self.identities, self.cameras, self.roles)


def concatenate(a: EmbeddingIndex, b: EmbeddingIndex) -> EmbeddingIndex:
    if a.dim != b.dim:
        raise ValidationError(f"cannot concatenate indices of dim {a.dim} and {b.dim}")
    return EmbeddingIndex(np.concatenate([a.vectors, b.vectors]),
                          np.concatenate([a.identities, b.identities]),
                          np.concatenate([a.cameras, b.cameras]),
                          np.concatenate([a.roles, b.roles]))


@dataclass
class EvalResult:
    mAP: float
    cmc: np.ndarray  # cmc[k-1] = CMC@k
    per_query_ap: list = field(default_factory=list)  # (query row, AP) for valid queries
    num_valid_queries: int = 0

    def rank(self, k):
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def rows(self, ranks=(1, 5, 10)):
        out = [("mAP", self.mAP), ("num_valid_queries", self.num_valid_queries)]
        out += [(f"cmc_{k}", self.rank(k)) for k in ranks if k <= len(self.cmc)]
        return out


# ---------------------------------------------------------------- extraction


def _role_of(split):
    if split not in ROLES:
        raise ValidationError(f"split {split!r} cannot go into an evaluation index")
    return ROLES.index(split)


def extract_index(model, samples, m) -> EmbeddingIndex:
    """Embed ``samples`` (query/gallery/distractor) resized to largest side ``m``."""
    vecs = [embed_array(model, resize_largest_side(s.pixels, m)) for s in samples]
    return EmbeddingIndex(np.stack(vecs), [s.identity for s in samples],
                          [s.camera for s in samples], [_role_of(s.split) for s in samples])


def extract_index_from_manifest(model, manifest, m) -> EmbeddingIndex:
    return extract_index(model, [load_sample(manifest, r) for r in manifest.records], m)


# ---------------------------------------------------------------- ranking


def rank_gallery(q_vec, gallery_vecs, gallery_rows=None):
    """Gallery positions by descending similarity (stable on ties)."""
    scores = np.asarray(gallery_vecs, np.float64) @ np.asarray(q_vec, np.float64)
    order = np.argsort(-scores, kind="stable")
    return order if gallery_rows is None else np.asarray(gallery_rows)[order]


def protocol_filter(q_identity, q_camera, identities, cameras, roles=None):
    """Keep mask and relevance flags over an already-ranked gallery list."""
    identities = np.asarray(identities)
    cameras = np.asarray(cameras)
    distractor = np.zeros(identities.shape, bool) if roles is None else np.asarray(roles) == DISTRACTOR
    same_id = (identities == q_identity) & ~distractor
    keep = ~(same_id & (cameras == q_camera))
    relevant = same_id[keep]
    return keep, relevant


def average_precision(relevance, total_relevant=None) -> float:
    rel = np.asarray(relevance, bool)
    r = int(rel.sum()) if total_relevant is None else int(total_relevant)
    if r < 1:
        raise ValidationError("average precision needs at least one relevant item")
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    precisions = hits[rel] / ranks[rel]
    return float(np.cumsum(precisions)[-1] / r) if precisions.size else 0.0


def _score_matrix(qv, gv):
    return np.asarray(qv, np.float64) @ np.asarray(gv, np.float64).T


def evaluate_scores(scores, q_ids, q_cams, g_ids, g_cams, g_roles=None, max_rank=None) -> EvalResult:
    """mAP/CMC from a ``[num_queries, num_gallery]`` similarity matrix."""
    scores = np.asarray(scores, np.float64)
    n_gal = scores.shape[1]
    if n_gal == 0:
        raise ValidationError("gallery is empty")
    max_rank = n_gal if max_rank is None else max_rank
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    g_roles = np.full(n_gal, GALLERY) if g_roles is None else np.asarray(g_roles)
    hits = np.zeros(max_rank, np.int64)
    per_query = []
    total = 0.0
    for qi in range(scores.shape[0]):
        order = np.argsort(-scores[qi], kind="stable")
        keep, rel = protocol_filter(q_ids[qi], q_cams[qi], g_ids[order], g_cams[order], g_roles[order])
        if not rel.any():
            continue
        ap = average_precision(rel)
        per_query.append((qi, ap))
        total += ap
        first = int(np.argmax(rel))
        if first < max_rank:
            hits[first] += 1
    if not per_query:
        raise ValidationError("no valid queries: every query lacks a cross-camera relevant row")
    nq = len(per_query)
    cmc = np.cumsum(hits) / nq
    return EvalResult(total / nq, cmc, per_query, nq)


def evaluate(index: EmbeddingIndex, max_rank=None, query_vectors=None, gallery_vectors=None) -> EvalResult:
    """Evaluate every query row against all gallery and distractor rows.

    ``query_vectors`` / ``gallery_vectors`` substitute the descriptors (e.g.
    after expansion) while the protocol still uses the index metadata.
    """
    q = index.rows(QUERY)
    g = index.gallery_rows()
    qv = index.vectors[q] if query_vectors is None else query_vectors
    gv = index.vectors[g] if gallery_vectors is None else gallery_vectors
    res = evaluate_scores(_score_matrix(qv, gv), index.identities[q], index.cameras[q],
                          index.identities[g], index.cameras[g], index.roles[g], max_rank)
    res.per_query_ap = [(int(q[i]), ap) for i, ap in res.per_query_ap]
    return res


def mean_ap(index: EmbeddingIndex) -> EvalResult:
    return evaluate(index)


def cmc(index: EmbeddingIndex, k: int) -> np.ndarray:
    return evaluate(index, max_rank=k).cmc


# ---------------------------------------------------------------- multi-query


def multi_query_embed(vectors) -> np.ndarray:
    v = np.asarray(vectors, np.float64)
    if v.ndim != 2 or v.shape[0] < 1:
        raise ValidationError("multi-query needs at least one query vector")
    mean = v.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm <= NORM_EPS:
        raise DegenerateVectorError("multi-query mean vector is degenerate")
    return (mean / norm).astype(np.float32)


def multi_query_index(index: EmbeddingIndex) -> EmbeddingIndex:
    """Collapse query rows sharing (identity, camera) into one aggregated row."""
    q = index.rows(QUERY)
    groups = {}
    for r in q:
        groups.setdefault((int(index.identities[r]), int(index.cameras[r])), []).append(r)
    g = index.gallery_rows()
    keys = list(groups)
    vecs = [multi_query_embed(index.vectors[groups[k]]) for k in keys]
    return EmbeddingIndex(np.concatenate([np.stack(vecs), index.vectors[g]]),
                          [k[0] for k in keys] + list(index.identities[g]),
                          [k[1] for k in keys] + list(index.cameras[g]),
                          [QUERY] * len(keys) + list(index.roles[g]))


# ---------------------------------------------------------------- distractors


@dataclass
class DistractorPoint:
    count: int
    mAP: float
    per_query_ap: list


def distractor_curve(index: EmbeddingIndex, distractor_vectors, counts, rng) -> list:
    """mAP as nested random distractor subsets are appended to the gallery."""
    counts = [int(c) for c in counts]
    if counts != sorted(counts) or any(c < 0 for c in counts):
        raise ValidationError("distractor counts must be non-negative and ascending")
    pool = np.asarray(distractor_vectors, np.float32).reshape(-1, index.dim)
    if counts and counts[-1] > pool.shape[0]:
        raise ValidationError(f"requested {counts[-1]} distractors, only {pool.shape[0]} available")
    order = rng.permutation(pool.shape[0])
    out = []
    for c in counts:
        extra = pool[order[:c]]
        aug = concatenate(index, EmbeddingIndex(extra.reshape(-1, index.dim), [-1] * c, [-1] * c,
                                                [DISTRACTOR] * c)) if c else index
        res = evaluate(aug)
        out.append(DistractorPoint(c, res.mAP, res.per_query_ap))
    return out
