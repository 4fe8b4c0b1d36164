"""Embedding network: conv backbone, global pooling, projection, l2-norm.

A classifier head can be attached to the pooled backbone feature for the
identity-classification pretraining phase; it is never part of a saved
embedding model.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .errors import ShapeError, ValidationError

POOLINGS = ("max", "avg")


@dataclass(frozen=True)
class BackboneConfig:
    """``blocks`` holds ``(out_channels, kernel_size, stride)`` triples.

    Pixels are standardised as ``(x - input_mean) / input_std`` before the
    first block; the mean shift acts like a fixed first-layer bias.
    """

    blocks: tuple = ((16, 3, 2), (32, 3, 2), (64, 3, 2))
    pooling: str = "max"
    embed_dim: int = 64
    in_channels: int = 3
    input_mean: float = 0.5
    input_std: float = 0.25

    def __post_init__(self):
        blocks = tuple(tuple(int(v) for v in blk) for blk in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not blocks:
            raise ValidationError("backbone needs at least one block")
        for cout, k, s in blocks:
            if cout < 1 or k < 1 or s < 1:
                raise ValidationError(f"invalid block {(cout, k, s)}")
        if self.pooling not in POOLINGS:
            raise ValidationError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.embed_dim < 2:
            raise ValidationError("embed_dim must be >= 2")
        if not self.input_std > 0:
            raise ValidationError("input_std must be positive")

    @property
    def feature_dim(self):
        return self.blocks[-1][0]

    def to_dict(self):
        return {
            "blocks": ",".join("x".join(str(v) for v in blk) for blk in self.blocks),
            "pooling": self.pooling,
            "embed_dim": str(self.embed_dim),
            "in_channels": str(self.in_channels),
            "input_mean": repr(float(self.input_mean)),
            "input_std": repr(float(self.input_std)),
        }

    @classmethod
    def from_dict(cls, d):
        blocks = tuple(tuple(int(v) for v in blk.split("x")) for blk in d["blocks"].split(","))
        return cls(blocks=blocks, pooling=d["pooling"], embed_dim=int(d["embed_dim"]),
                   in_channels=int(d.get("in_channels", 3)),
                   input_mean=float(d.get("input_mean", 0.5)), input_std=float(d.get("input_std", 0.25)))


class EmbeddingModel:
    def __init__(self, config: BackboneConfig, conv_w, conv_b, proj_w, proj_b):
        self.config = config
        self.conv_w = list(conv_w)
        self.conv_b = list(conv_b)
        self.proj_w = proj_w
        self.proj_b = proj_b
        self._check()

    def _check(self):
        cin = self.config.in_channels
        for i, (cout, k, _) in enumerate(self.config.blocks):
            if self.conv_w[i].shape != (cout, cin, k, k) or self.conv_b[i].shape != (cout,):
                raise ShapeError(f"block {i} parameters do not match config")
            cin = cout
        if self.proj_w.shape != (self.config.embed_dim, cin) or self.proj_b.shape != (self.config.embed_dim,):
            raise ShapeError("projection parameters do not match config")

    def named_params(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"block{i}.weight"] = w
            out[f"block{i}.bias"] = b
        out["proj.weight"] = self.proj_w
        out["proj.bias"] = self.proj_b
        return out

    def params(self):
        return list(self.named_params().values())

    def zero_grad(self):
        nd.zero_grads(self.params())

    def copy(self, dtype=None):
        def cp(t):
            return nd.Tensor(t.data.copy() if dtype is None else t.data.astype(dtype),
                             requires_grad=t.requires_grad, name=t.name, dtype=None)
        return EmbeddingModel(self.config, [cp(w) for w in self.conv_w], [cp(b) for b in self.conv_b],
                              cp(self.proj_w), cp(self.proj_b))

    @classmethod
    def from_tensors(cls, config, tensors):
        def get(name):
            if name not in tensors:
                raise ValidationError(f"checkpoint is missing tensor {name!r}")
            return nd.Tensor(tensors[name], requires_grad=True, name=name)
        n = len(config.blocks)
        return cls(config, [get(f"block{i}.weight") for i in range(n)],
                   [get(f"block{i}.bias") for i in range(n)], get("proj.weight"), get("proj.bias"))


class ClassifierHead:
    def __init__(self, w, b):
        self.w = w
        self.b = b

    @property
    def num_identities(self):
        return self.w.shape[0]

    def params(self):
        return [self.w, self.b]


def _uniform(rng, shape, fan_in, name):
    bound = 1.0 / np.sqrt(fan_in)
    return nd.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _zeros(shape, name):
    return nd.Tensor(np.zeros(shape), requires_grad=True, name=name)


def init_model(config: BackboneConfig, seed: int) -> EmbeddingModel:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    conv_w, conv_b = [], []
    cin = config.in_channels
    for i, (cout, k, _) in enumerate(config.blocks):
        conv_w.append(_uniform(rng, (cout, cin, k, k), cin * k * k, f"block{i}.weight"))
        conv_b.append(_zeros((cout,), f"block{i}.bias"))
        cin = cout
    proj_w = _uniform(rng, (config.embed_dim, cin), cin, "proj.weight")
    proj_b = _zeros((config.embed_dim,), "proj.bias")
    return EmbeddingModel(config, conv_w, conv_b, proj_w, proj_b)


def reinit_projection(model: EmbeddingModel, seed: int) -> EmbeddingModel:
    """Keep the backbone, draw a fresh projection (start of the triplet phase)."""
    fresh = init_model(model.config, seed)
    out = model.copy()
    out.proj_w, out.proj_b = fresh.proj_w, fresh.proj_b
    return out


def init_head(feature_dim: int, num_identities: int, seed: int) -> ClassifierHead:
    rng = np.random.default_rng(seed)
    return ClassifierHead(_uniform(rng, (num_identities, feature_dim), feature_dim, "head.weight"),
                          _zeros((num_identities,), "head.bias"))


@contextlib.contextmanager
def no_record():
    """Run ops forward-only even inside an active tape."""
    stack = nd._stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def backbone(model: EmbeddingModel, image: nd.Tensor):
    """Returns ``(pooled_feature, last_conv_activation)``."""
    if image.data.ndim not in (3, 4) or image.shape[-3] != model.config.in_channels:
        raise ShapeError(f"expected {model.config.in_channels} input channels, got {image.shape}")
    cfg = model.config
    x = nd.Tensor((image.data - cfg.input_mean) / cfg.input_std, dtype=None)
    for (cout, k, s), cw, cb in zip(model.config.blocks, model.conv_w, model.conv_b):
        x = nd.relu(nd.conv2d(x, cw, cb, stride=s, pad=k // 2))
    pool = nd.global_max_pool if model.config.pooling == "max" else nd.global_avg_pool
    return pool(x), x


@dataclass
class EmbedResult:
    embedding: nd.Tensor
    last_conv: nd.Tensor | None
    tape: nd.Tape | None


def forward_embed(model: EmbeddingModel, image: nd.Tensor, keep_activations=False, record=True):
    """Embed one image ``[3,H,W]`` (or a same-size batch) to unit norm.

    With ``record`` the ops go on the active tape, or a fresh one when none
    is active; without it, nothing is recorded.
    """
    tape = nd.current_tape() if record else None
    if record and tape is None:
        tape = nd.Tape()
        ctx = tape
    elif record:
        ctx = contextlib.nullcontext()
    else:
        ctx = no_record()
    with ctx:
        pooled, act = backbone(model, image)
        emb = nd.l2_normalize(nd.affine(pooled, model.proj_w, model.proj_b))
    return EmbedResult(emb, act if keep_activations else None, tape)


def embed_array(model: EmbeddingModel, pixels: np.ndarray) -> np.ndarray:
    """Inference-only embedding of a ``[3,H,W]`` or ``[N,3,H,W]`` array."""
    res = forward_embed(model, nd.Tensor(pixels, dtype=model.proj_w.dtype), record=False)
    return res.embedding.data


def forward_classify(model: EmbeddingModel, head: ClassifierHead, image: nd.Tensor) -> nd.Tensor:
    pooled, _ = backbone(model, image)
    if pooled.shape[-1] != head.w.shape[1]:
        raise ShapeError(f"head expects {head.w.shape[1]} features, backbone gives {pooled.shape[-1]}")
    return nd.affine(pooled, head.w, head.b)


def count_params(model: EmbeddingModel) -> int:
    return int(sum(p.size for p in model.params()))
