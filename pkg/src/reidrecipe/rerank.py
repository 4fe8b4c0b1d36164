"""Query and gallery expansion by neighbour averaging.

Each gallery descriptor is replaced by the renormalised mean of itself and
its ``n_gallery`` nearest gallery neighbours; each query by the mean of
itself and its ``n_query`` nearest gallery neighbours.  Neighbours are
always taken from the original gallery descriptors.
"""

import numpy as np

from .errors import DegenerateVectorError, ValidationError
from .evalrank import EvalResult, EmbeddingIndex, evaluate
from .ndtensor import NORM_EPS

DEFAULT_N_QUERY = 5
DEFAULT_N_GALLERY = 10


def nearest_rows(vectors, source, n, self_rows=None):
    """``[len(vectors), n]`` source rows by descending dot product.

    ``self_rows[i]`` (if given) is excluded from row ``i``'s neighbours.
    Ties resolve to the lower source row.
    """
    v = np.asarray(vectors, np.float64)
    s = np.asarray(source, np.float64)
    available = s.shape[0] - (1 if self_rows is not None else 0)
    if n < 1:
        raise ValidationError("expansion needs n >= 1")
    if s.shape[0] == 0 or n > available:
        raise ValidationError(f"cannot take {n} neighbours from {available} candidate rows; use a smaller n")
    scores = v @ s.T
    if self_rows is not None:
        scores[np.arange(v.shape[0]), np.asarray(self_rows)] = -np.inf
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :n]


def expand_vectors(vectors, source, n, self_rows=None, include_self=True):
    v = np.asarray(vectors, np.float64)
    s = np.asarray(source, np.float64)
    nbrs = nearest_rows(v, s, n, self_rows)
    total = s[nbrs].sum(axis=1)
    count = n
    if include_self:
        total = total + v
        count += 1
    mean = total / count
    norms = np.linalg.norm(mean, axis=1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise DegenerateVectorError("expanded vector is degenerate")
    return (mean / norms).astype(np.float32)


def expanded_descriptors(index: EmbeddingIndex, n_query=DEFAULT_N_QUERY, n_gallery=DEFAULT_N_GALLERY,
                         include_self=True):
    g = index.gallery_rows()
    if n_gallery > len(g) - 1:
        raise ValidationError(
            f"gallery has {len(g)} rows; gallery expansion with n={n_gallery} needs n <= {len(g) - 1}")
    gallery = index.vectors[g]
    queries = index.vectors[index.rows(0)]
    new_gallery = expand_vectors(gallery, gallery, n_gallery, np.arange(len(g)), include_self)
    new_queries = expand_vectors(queries, gallery, n_query, None, include_self)
    return new_queries, new_gallery


def rerank_evaluate(index: EmbeddingIndex, n_query=DEFAULT_N_QUERY, n_gallery=DEFAULT_N_GALLERY,
                    include_self=True, max_rank=None) -> EvalResult:
    qv, gv = expanded_descriptors(index, n_query, n_gallery, include_self)
    return evaluate(index, max_rank=max_rank, query_vectors=qv, gallery_vectors=gv)
