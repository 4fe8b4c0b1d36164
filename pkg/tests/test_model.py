from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reidrecipe import ndtensor as nd
from reidrecipe.errors import ShapeError, ValidationError
from reidrecipe.model import (BackboneConfig, EmbeddingModel, backbone, count_params, embed_array,
                              forward_classify, forward_embed, init_head, init_model, reinit_projection)

SMALL = BackboneConfig(blocks=((4, 3, 2), (6, 3, 2)), embed_dim=8)


def test_init_deterministic_and_seed_sensitive():
    a, b, c = init_model(SMALL, 5), init_model(SMALL, 5), init_model(SMALL, 6)
    for pa, pb in zip(a.params(), b.params()):
        np.testing.assert_array_equal(pa.data, pb.data)
    assert any(not np.array_equal(pa.data, pc.data) for pa, pc in zip(a.params(), c.params()))


def test_init_fan_in_range():
    cfg = BackboneConfig(blocks=((8, 3, 1), (16, 3, 1)), embed_dim=4)
    bound = 1 / np.sqrt(72)
    for seed in range(5):
        w = init_model(cfg, seed).conv_w[1].data
        assert w.shape == (16, 8, 3, 3)
        assert np.all(np.abs(w) <= bound)
        # the draw actually uses most of the range
        assert np.abs(w).max() > 0.9 * bound


def test_init_biases_zero():
    m = init_model(SMALL, 0)
    for b in m.conv_b + [m.proj_b]:
        assert not b.data.any()


@pytest.mark.parametrize("h, w", [(32, 16), (48, 24), (64, 64), (17, 40), (90, 33), (20, 20)])
def test_embedding_dim_independent_of_input_size(h, w, rng):
    model = init_model(SMALL, 1)
    e = forward_embed(model, nd.Tensor(rng.uniform(size=(3, h, w)))).embedding
    assert e.shape == (SMALL.embed_dim,)
    assert abs(np.linalg.norm(e.data.astype(np.float64)) - 1) < 1e-5


@settings(max_examples=25, deadline=None)
@given(h=st.integers(8, 48), w=st.integers(8, 48), seed=st.integers(0, 1000),
       scale=st.floats(0.01, 50.0))
def test_embedding_unit_norm_property(h, w, seed, scale):
    r = np.random.default_rng(seed)
    e = embed_array(init_model(SMALL, seed), (r.uniform(size=(3, h, w)) * scale).astype(np.float32))
    assert abs(np.linalg.norm(e.astype(np.float64)) - 1) < 1e-5


def test_doubling_intensity_changes_embedding(rng):
    model = init_model(SMALL, 2)
    x = rng.uniform(0, 0.5, size=(3, 32, 16)).astype(np.float32)
    assert not np.allclose(embed_array(model, x), embed_array(model, 2 * x), atol=1e-6)


def test_too_small_or_wrong_channel_image_rejected():
    model = init_model(SMALL, 0)
    with pytest.raises(ShapeError):
        forward_embed(model, nd.Tensor(np.zeros((3, 0, 8))))
    with pytest.raises(ShapeError):
        forward_embed(model, nd.Tensor(np.zeros((1, 16, 8))))


def test_keep_activations_and_tape(rng):
    model = init_model(SMALL, 0)
    res = forward_embed(model, nd.Tensor(rng.uniform(size=(3, 16, 16))), keep_activations=True)
    assert res.last_conv.shape == (6, 4, 4)
    assert len(res.tape) > 0
    quiet = forward_embed(model, nd.Tensor(rng.uniform(size=(3, 16, 16))), record=False)
    assert quiet.tape is None


def test_batched_embedding_matches_single(rng):
    model = init_model(SMALL, 3)
    x = rng.uniform(size=(4, 3, 24, 12)).astype(np.float32)
    batched = embed_array(model, x)
    for i in range(4):
        np.testing.assert_allclose(batched[i], embed_array(model, x[i]), rtol=1e-6, atol=1e-7)


def test_max_pool_translation_tolerance():
    cfg = BackboneConfig(blocks=((4, 3, 1), (5, 3, 1)), embed_dim=4, input_mean=0.0, input_std=1.0)
    model = init_model(cfg, 0).copy(np.float64)
    patch = np.random.default_rng(9).uniform(size=(3, 3, 3))

    def pooled_at(r, c):
        img = np.zeros((3, 20, 20))
        img[:, r:r + 3, c:c + 3] = patch
        return backbone(model, nd.Tensor(img, dtype=np.float64))[0].data

    base = pooled_at(5, 5)
    assert base.any()
    for r, c in [(8, 3), (12, 12), (4, 10)]:
        np.testing.assert_allclose(pooled_at(r, c), base, rtol=0, atol=1e-13)


def test_classifier_logits_and_softmax(rng):
    model = init_model(SMALL, 0)
    head = init_head(SMALL.feature_dim, 4, 1)
    logits = forward_classify(model, head, nd.Tensor(rng.uniform(size=(3, 32, 32)))).data
    assert logits.shape == (4,)
    p = np.exp(logits - logits.max())
    assert abs(np.sum(p / p.sum()) - 1) < 1e-6
    with pytest.raises(ShapeError):
        forward_classify(model, init_head(SMALL.feature_dim + 1, 4, 1), nd.Tensor(np.zeros((3, 16, 16))))


def test_classifier_gradient_wrt_backbone_fd():
    cfg = BackboneConfig(blocks=((3, 3, 2), (4, 3, 1)), embed_dim=3)
    r = np.random.default_rng(4)
    img = nd.Tensor(r.uniform(size=(3, 7, 6)), dtype=np.float64)
    base = init_model(cfg, 0)
    head = init_head(4, 5, 2)
    hw = nd.Tensor(head.w.data, dtype=np.float64)
    hb = nd.Tensor(r.normal(0, 0.1, 5), dtype=np.float64)
    biases = [r.normal(0, 0.1, b.shape) for b in base.conv_b]

    def loss(w1, w2):
        m = EmbeddingModel(cfg, [w1, w2], [nd.Tensor(b, dtype=np.float64) for b in biases],
                           base.proj_w.astype(np.float64), base.proj_b.astype(np.float64))
        return nd.softmax_cross_entropy(forward_classify(m, type(head)(hw, hb), img), 3)

    ws = [nd.Tensor(w.data, dtype=np.float64) for w in base.conv_w]
    with nd.Tape() as tape:
        loss(*[nd.Tensor(w.data, requires_grad=True, dtype=np.float64) for w in ws])
    assert tape.kink_margin() > 1e-6
    assert nd.finite_diff_check(loss, ws) < 1e-5


def test_count_params_hand_count():
    cfg = BackboneConfig(blocks=((1, 1, 1),), embed_dim=2, in_channels=1)
    assert count_params(init_model(cfg, 0)) == 6
    bigger = replace(cfg, embed_dim=4)
    assert init_model(bigger, 0).proj_w.size == 2 * init_model(cfg, 0).proj_w.size


def test_count_params_desk_default_shape_oracle():
    cfg = BackboneConfig()
    total, cin = 0, 3
    for cout, k, _ in cfg.blocks:
        total += cout * cin * k * k + cout
        cin = cout
    total += cfg.embed_dim * cin + cfg.embed_dim
    assert count_params(init_model(cfg, 0)) == total


def test_reinit_projection_keeps_backbone():
    m = init_model(SMALL, 0)
    fresh = reinit_projection(m, 7)
    for a, b in zip(m.conv_w, fresh.conv_w):
        np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(m.proj_w.data, fresh.proj_w.data)


@pytest.mark.parametrize("kw", [dict(blocks=()), dict(pooling="sum"), dict(embed_dim=1),
                                dict(input_std=0.0), dict(blocks=((0, 3, 1),))])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        BackboneConfig(**kw)


def test_config_dict_round_trip():
    cfg = BackboneConfig(blocks=((5, 3, 2), (7, 1, 1)), pooling="avg", embed_dim=12, input_mean=0.25)
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg
