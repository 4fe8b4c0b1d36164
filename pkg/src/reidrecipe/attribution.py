"""Which embedding dimensions drive a match, and where they look.

Grad-CAM here weights the final conv activations ``A[C,H',W']`` by the
spatial mean of ``d s / d A`` for a scalar ``s`` built from embedding
entries, keeps the positive part of the weighted sum, upsamples it
bilinearly to the image grid and divides by its maximum.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from . import pnm
from .augment import resize
from .errors import ShapeError, ValidationError
from .model import EmbeddingModel, backbone, embed_array

DEFAULT_TOP_DIMS = 5
DEFAULT_ATTENTION_DIMS = 50
ATTENTION_MODES = ("abs", "signed")


@dataclass
class Heatmap:
    values: np.ndarray  # [H,W] in [0,1]
    source_id: str | None = None
    dims: tuple = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeError(f"heatmap must be [H,W], got {self.values.shape}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValidationError("heatmap values must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape

    def peak(self):
        """Row-major first ``(row, col)`` of the maximum."""
        return np.unravel_index(int(np.argmax(self.values)), self.values.shape)


def top_contrib_dims(e_q, e_d, n=DEFAULT_TOP_DIMS):
    """Dims with the ``n`` largest products ``e_q[i] * e_d[i]``, descending."""
    q = np.asarray(e_q, np.float64)
    d = np.asarray(e_d, np.float64)
    if q.shape != d.shape or q.ndim != 1:
        raise ShapeError(f"embeddings must be equal-length vectors, got {q.shape} and {d.shape}")
    if not 1 <= n <= q.size:
        raise ValidationError(f"n must lie in [1, {q.size}], got {n}")
    products = q * d
    return np.argsort(-products, kind="stable")[:n]


def contributions(e_q, e_d, dims):
    """``(dim, e_q[dim] * e_d[dim])`` rows for the CSV export."""
    q = np.asarray(e_q, np.float64)
    d = np.asarray(e_d, np.float64)
    return [(int(i), float(q[i] * d[i])) for i in dims]


def _check_dims(dims, dim):
    dims = tuple(int(i) for i in np.atleast_1d(dims))
    if not dims or any(i < 0 or i >= dim for i in dims):
        raise ValidationError(f"dims must be non-empty indices in [0, {dim})")
    return dims


def _cam(model: EmbeddingModel, image, weights):
    """Grad-CAM for ``s = sum(weights * e)``; ``weights`` is a [D] seed."""
    pixels = np.asarray(image, dtype=np.float32)
    if pixels.ndim != 3:
        raise ShapeError(f"attribution works on one [3,H,W] image, got {pixels.shape}")
    work = model.copy()
    for prm in work.params():
        prm.requires_grad = True
    with nd.Tape() as tape:
        pooled, act = backbone(work, nd.Tensor(pixels))
        if not act.data.any():
            # relu(sum_c w_c A_c) vanishes whatever the weights are
            return np.zeros(pixels.shape[1:], np.float32)
        emb = nd.l2_normalize(nd.affine(pooled, work.proj_w, work.proj_b))
    grads = nd.backward(tape, emb, seed=weights, wrt=[act])
    a = act.data.astype(np.float64)
    w = grads[act].astype(np.float64).mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(w, a, axes=1), 0.0).astype(np.float32)
    up = np.maximum(resize(cam[None], *pixels.shape[1:])[0], 0.0)
    top = float(up.max())
    return (up / top).astype(np.float32) if top > 0 else np.zeros_like(up)


def gradcam_map(model: EmbeddingModel, image, dims, source_id=None) -> Heatmap:
    dims = _check_dims(dims, model.config.embed_dim)
    seed = np.zeros(model.config.embed_dim, np.float32)
    seed[list(dims)] = 1.0
    return Heatmap(np.clip(_cam(model, image, seed), 0, 1), source_id, dims)


def attention_dims(embedding, n=DEFAULT_ATTENTION_DIMS, mode="abs"):
    e = np.asarray(embedding, np.float64)
    if mode not in ATTENTION_MODES:
        raise ValidationError(f"mode must be one of {ATTENTION_MODES}")
    if not 1 <= n <= e.size:
        raise ValidationError(f"n must lie in [1, {e.size}], got {n}")
    key = np.abs(e) if mode == "abs" else e
    return np.argsort(-key, kind="stable")[:n]


def implicit_attention(model: EmbeddingModel, image, n=DEFAULT_ATTENTION_DIMS, mode="abs",
                       source_id=None) -> Heatmap:
    """Grad-CAM over the ``n`` strongest embedding entries.

    In ``abs`` mode the target is the sum of their magnitudes, so each
    selected entry is seeded with its sign; ``signed`` seeds them with 1.
    """
    e = embed_array(model, np.asarray(image, np.float32))
    dims = attention_dims(e, n, mode)
    seed = np.zeros(e.size, np.float32)
    seed[dims] = np.sign(e[dims]) if mode == "abs" else 1.0
    return Heatmap(np.clip(_cam(model, image, seed), 0, 1), source_id, tuple(int(i) for i in dims))


def overlay(heatmap: Heatmap, image):
    """Red channel pushed towards 1 in proportion to the map."""
    img = np.asarray(image, np.float32)
    if img.ndim != 3 or img.shape[1:] != heatmap.shape:
        raise ShapeError(f"image {img.shape} does not match heatmap {heatmap.shape}")
    out = img.copy()
    v = heatmap.values
    out[0] = img[0] + v * (1.0 - img[0])
    return out


def export_heatmap(heatmap: Heatmap, image, path):
    """Write ``<path>.pgm`` (map) and ``<path>_overlay.ppm``; returns both paths."""
    base = os.fspath(path)
    if base.endswith(".pgm"):
        base = base[:-4]
    pgm_path, ppm_path = base + ".pgm", base + "_overlay.ppm"
    ov = overlay(heatmap, image)
    pnm.write_pgm(pgm_path, heatmap.values)
    pnm.write_ppm(ppm_path, ov)
    return pgm_path, ppm_path


def write_contributions(path, rows):
    lines = ["dim,contribution"] + [f"{d},{c!r}" for d, c in rows]
    pnm.atomic_write_text(path, "\n".join(lines) + "\n")
