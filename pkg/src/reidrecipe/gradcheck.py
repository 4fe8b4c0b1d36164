"""Central finite-difference checks for every differentiable op.

Each case draws float64 inputs and redraws until every recorded kink
(ReLU input, max-pool top-2 gap, hinge value) is at least ``MIN_KINK``
away, so the +/-eps probes never straddle a non-differentiable point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .errors import NumericFault, ShapeError
from .model import BackboneConfig, EmbeddingModel, forward_embed, init_model

MIN_KINK = 0.01
TOLERANCE = 1e-5
EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    kink_margin: float
    num_inputs: int

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE and self.kink_margin >= MIN_KINK


def _margin(fn, arrays):
    xs = [nd.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with nd.Tape() as tape:
        fn(*xs)
    return tape.kink_margin()


def _draw(rng, make, fn, tries=500):
    for _ in range(tries):
        arrays = make(rng)
        margin = _margin(fn, arrays)
        if margin >= MIN_KINK:
            return arrays, margin
    raise NumericFault(f"no input draw kept kinks {MIN_KINK} away after {tries} tries")


def _case(name, rng, make, fn):
    arrays, margin = _draw(rng, make, fn)
    tensors = [nd.Tensor(a, dtype=np.float64) for a in arrays]
    err = nd.finite_diff_check(fn, tensors, eps=EPS)
    return CheckResult(name, float(err), float(margin), sum(a.size for a in arrays))


def probe(x: nd.Tensor, weights) -> nd.Tensor:
    """Scalar ``sum(weights * x)``, a harness-only op for non-scalar layers."""
    wts = np.asarray(weights, dtype=np.float64)
    if wts.shape != x.shape:
        raise ShapeError(f"probe: weights {wts.shape} do not match input {x.shape}")
    out = np.asarray(np.sum(x.data.astype(np.float64) * wts)).astype(x.dtype)

    def backward(g):
        return ((g * wts).astype(x.dtype),)

    return nd._emit("probe", (x,), out, backward)


def _probed(op):
    """Wrap a non-scalar op with a fixed random linear probe."""
    cache = {}

    def fn(*xs):
        out = op(*xs)
        key = out.shape
        if key not in cache:
            cache[key] = np.random.default_rng(len(cache) + 101).normal(size=key)
        return probe(out, cache[key])

    return fn


def composed_loss(images, w1, b1, w2, b2, pw, pb, m=nd.DEFAULT_MARGIN):
    """conv -> relu -> conv -> relu -> max-pool -> affine -> l2-norm, x3, hinge."""
    def embed(x):
        h = nd.relu(nd.conv2d(x, w1, b1, stride=2, pad=1))
        h = nd.relu(nd.conv2d(h, w2, b2, stride=1, pad=1))
        return nd.l2_normalize(nd.affine(nd.global_max_pool(h), pw, pb))
    q, p, n = (embed(x) for x in images)
    return nd.triplet_hinge(q, p, n, m)


def _composed_make(rng):
    w1 = rng.normal(0, 0.4, (4, 3, 3, 3))
    b1 = rng.normal(0, 0.1, 4)
    w2 = rng.normal(0, 0.4, (5, 4, 3, 3))
    b2 = rng.normal(0, 0.1, 5)
    pw = rng.normal(0, 0.5, (6, 5))
    pb = rng.normal(0, 0.1, 6)
    return [w1, b1, w2, b2, pw, pb]


def _composed_fn(images):
    imgs = [nd.Tensor(x, dtype=np.float64) for x in images]

    def fn(w1, b1, w2, b2, pw, pb):
        # margin large enough that random draws usually leave the hinge active
        return composed_loss(imgs, w1, b1, w2, b2, pw, pb, m=0.5)
    return fn


_TINY = BackboneConfig(blocks=((3, 3, 2), (4, 3, 1)), embed_dim=5)


def _model_make(rng):
    return [rng.normal(0, 0.1 if t.data.ndim == 1 else 0.4, t.shape) for t in init_model(_TINY, 0).params()]


def _model_fn(images):
    def fn(w1, b1, w2, b2, pw, pb):
        model = EmbeddingModel(_TINY, [w1, w2], [b1, b2], pw, pb)
        q, p, n = (forward_embed(model, nd.Tensor(x, dtype=np.float64)).embedding for x in images)
        return nd.triplet_hinge(q, p, n, 0.5)
    return fn


def run_suite(seed=0):
    rng = np.random.default_rng(seed)
    cases = [
        ("conv2d", lambda r: [r.normal(size=(2, 5, 6)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
         _probed(lambda x, w, b: nd.conv2d(x, w, b, stride=2, pad=1))),
        ("conv2d_batched", lambda r: [r.normal(size=(2, 2, 4, 5)), r.normal(size=(3, 2, 2, 3)),
                                      r.normal(size=3)],
         _probed(lambda x, w, b: nd.conv2d(x, w, b, stride=1, pad=0))),
        ("relu", lambda r: [r.normal(size=(4, 5))], _probed(nd.relu)),
        ("global_max_pool", lambda r: [r.normal(size=(3, 4, 4))], _probed(nd.global_max_pool)),
        ("global_avg_pool", lambda r: [r.normal(size=(2, 3, 4, 4))], _probed(nd.global_avg_pool)),
        ("affine", lambda r: [r.normal(size=5), r.normal(size=(4, 5)), r.normal(size=4)],
         _probed(nd.affine)),
        ("affine_batched", lambda r: [r.normal(size=(3, 5)), r.normal(size=(4, 5)), r.normal(size=4)],
         _probed(nd.affine)),
        ("l2_normalize", lambda r: [r.normal(size=6)], _probed(nd.l2_normalize)),
        ("l2_normalize_batched", lambda r: [r.normal(size=(3, 6))], _probed(nd.l2_normalize)),
        ("dot", lambda r: [r.normal(size=6), r.normal(size=6)], nd.dot),
        ("softmax_cross_entropy", lambda r: [r.normal(size=5)],
         lambda z: nd.softmax_cross_entropy(z, 2)),
        ("softmax_cross_entropy_batched", lambda r: [r.normal(size=(3, 5))],
         lambda z: nd.softmax_cross_entropy(z, [0, 4, 2])),
        ("triplet_hinge", lambda r: [r.normal(size=6), r.normal(size=6), r.normal(size=6)],
         lambda q, p, n: nd.triplet_hinge(q, p, n, 3.0)),
        ("composed", _composed_make, _composed_fn([rng.uniform(0, 1, (3, 9, 8)) for _ in range(3)])),
        ("model_triplet", _model_make,
         _model_fn([rng.uniform(0, 1, (3, 8, 7)) for _ in range(3)])),
    ]
    return [_case(name, rng, make, fn) for name, make, fn in cases]


def worst(results):
    return max(r.max_rel_error for r in results)
