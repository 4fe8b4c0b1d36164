import dataclasses
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reidrecipe import synthdata as sd
from reidrecipe.errors import ManifestError, StorageError, ValidationError


def _spec(**kw):
    base = dict(torso_color=(0.8, 0.1, 0.1), legs_color=(0.1, 0.1, 0.7), skin_tone=(0.9, 0.7, 0.6),
                torso_length_frac=0.35, legs_length_frac=0.4, accessory="none",
                accessory_color=(0.2, 0.9, 0.2), body_width_frac=0.3)
    base.update(kw)
    return sd.IdentitySpec(**base)


def test_sample_identity_same_state_same_spec():
    a = sd.sample_identity(np.random.default_rng(3))
    b = sd.sample_identity(np.random.default_rng(3))
    assert a == b


def test_sample_identity_ranges_and_accessory_frequencies():
    rng = np.random.default_rng(0)
    specs = [sd.sample_identity(rng) for _ in range(10_000)]  # __post_init__ checks the ranges
    counts = {k: 0 for k in sd.ACCESSORIES}
    for s in specs:
        counts[s.accessory] += 1
    assert all(counts.values())
    for kind, p in zip(sd.ACCESSORIES, sd.ACCESSORY_PROBS):
        # 5 binomial standard deviations
        assert abs(counts[kind] / 10_000 - p) < 5 * np.sqrt(p * (1 - p) / 10_000)


def test_render_bit_identical():
    cap = sd.CaptureParams(1, noise_sigma=0.03, clutter=3, facing="left")
    a = sd.render(_spec(), cap, seed=11).pixels
    b = sd.render(_spec(), cap, seed=11).pixels
    assert a.dtype == np.float32 and a.shape == (3, 64, 32)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_occlusion_region_holds_fill_value():
    cap = sd.CaptureParams(0, noise_sigma=0.05, occlusion_rect=(0.25, 0.25, 0.75, 0.5), out_h=64, out_w=32)
    px = sd.render(_spec(), cap, seed=2).pixels
    region = px[:, 16:32, 8:24]
    assert np.all(region == np.float32(sd.OCCLUSION_FILL))
    assert not np.all(px[:, 40:, :] == np.float32(sd.OCCLUSION_FILL))


@pytest.mark.parametrize("facing", sd.FACINGS)
@pytest.mark.parametrize("accessory", sd.ACCESSORIES)
def test_torso_colour_change_stays_in_torso(facing, accessory):
    cap = sd.CaptureParams(0, facing=facing, noise_sigma=0.0, out_h=96, out_w=48)
    a = _spec(accessory=accessory)
    b = dataclasses.replace(a, torso_color=(0.1, 0.8, 0.3))
    pa, layers = sd.render_with_layers(a, cap, 5)
    pb = sd.render(b, cap, 5).pixels
    diff = np.any(pa.pixels != pb, axis=0)
    assert diff.any()
    assert not np.any(diff & ~layers["torso"])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20), facing=st.sampled_from(sd.FACINGS))
def test_same_identity_same_colours_across_captures(seed, facing):
    """Noise-free renders of one identity share the garment colours wherever they are visible."""
    rng = np.random.default_rng(seed)
    spec = sd.sample_identity(rng)
    cam = sd._cameras(2, seed)[0]
    for k in range(2):
        cap = sd.sample_capture(rng, 0, cam, (64, 96), occlusion_prob=0.0)
        cap = dataclasses.replace(cap, noise_sigma=0.0, gain=1.0, facing=facing)
        px, layers = sd.render_with_layers(spec, cap, k)
        torso = layers["torso"] & ~layers["head"] & ~layers["accessory"]
        if torso.any():
            np.testing.assert_allclose(px.pixels[:, torso].T, np.tile(spec.torso_color, (torso.sum(), 1)),
                                       atol=1e-6)


@pytest.mark.parametrize("kw", [dict(out_h=8), dict(facing="up"), dict(scale=2.0), dict(gain=0.1),
                                dict(noise_sigma=0.5), dict(occlusion_rect=(0.5, 0.5, 0.2, 0.9))])
def test_capture_validation(kw):
    with pytest.raises(ValidationError):
        sd.CaptureParams(0, **kw)


def test_default_dataset_counts_and_invariants():
    ds = sd.generate_dataset(n_train_ids=64, n_test_ids=32, per_id=8, n_cams=4, seed=0)
    counts = ds.manifest.counts
    assert counts["train"] == 512
    assert counts["query"] + counts["gallery"] == 256
    assert counts["distractor"] == 0
    train = set(ds.manifest.identities("train"))
    test = set(ds.manifest.identities("query", "gallery"))
    assert not train & test and len(train) == 64 and len(test) == 32
    # scan oracle for cross-camera coverage
    for q in ds.manifest.records:
        if q.split == "query":
            assert any(g.split == "gallery" and g.identity == q.identity and g.camera != q.camera
                       for g in ds.manifest.records)
    sizes = {s.pixels.shape[1:] for s in ds.samples}
    assert len(sizes) > 20
    for s in ds.samples:
        assert 64 <= s.pixels.shape[1] <= 112


def test_train_identities_span_cameras():
    ds = sd.generate_dataset(n_train_ids=6, n_test_ids=4, per_id=8, n_cams=3, seed=1)
    for ident in ds.manifest.identities("train"):
        assert len({r.camera for r in ds.manifest.records if r.identity == ident}) >= 2


@settings(max_examples=10, deadline=None)
@given(n_train=st.integers(1, 4), n_test=st.integers(1, 4), per_id=st.integers(4, 9),
       n_cams=st.integers(2, 5), seed=st.integers(0, 10_000))
def test_generated_manifests_always_valid(n_train, n_test, per_id, n_cams, seed):
    ds = sd.generate_dataset(n_train, n_test, per_id, n_cams, (24, 40), seed)
    ds.manifest.validate()
    assert len(ds.manifest) == (n_train + n_test) * per_id


@pytest.mark.parametrize("kw", [dict(n_train_ids=0), dict(n_test_ids=0), dict(n_cams=1), dict(per_id=2),
                                dict(size_range=(40, 20))])
def test_invalid_counts_rejected(kw):
    with pytest.raises(ValidationError):
        sd.generate_dataset(**{**dict(n_train_ids=2, n_test_ids=2, per_id=4, n_cams=2), **kw})


def test_distractors():
    assert sd.generate_distractors(0, 1) == []
    a = sd.generate_distractors(6, 4)
    b = sd.generate_distractors(6, 4)
    assert all(d.identity == -1 and d.split == "distractor" for d in a)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.pixels, y.pixels)


def test_manifest_round_trip(tmp_path):
    ds = sd.generate_dataset(3, 2, 4, 2, (24, 32), seed=5, out_dir=tmp_path, n_distractors=2)
    loaded = sd.load_manifest(tmp_path / "manifest.csv")
    assert loaded == ds.manifest
    sample = sd.load_sample(loaded, loaded.records[0])
    np.testing.assert_allclose(sample.pixels, ds.samples[0].pixels, atol=0.5 / 255 + 1e-6)


def _write(path, rows):
    path.write_text("path,identity,camera,split\n" + "".join(r + "\n" for r in rows))
    return path


def test_manifest_short_row_names_line(tmp_path):
    p = _write(tmp_path / "m.csv", ["a.ppm,0,0,train", "b.ppm,1,0"])
    with pytest.raises(ManifestError) as exc:
        sd.load_manifest(p, check_files=False)
    assert exc.value.line == 3
    assert "line 3" in str(exc.value)


def test_manifest_split_overlap_rejected(tmp_path):
    p = _write(tmp_path / "m.csv", ["a.ppm,0,0,train", "b.ppm,0,0,query", "c.ppm,0,1,gallery"])
    with pytest.raises(ValidationError, match="overlap"):
        sd.load_manifest(p, check_files=False)


def test_manifest_dangling_path_and_missing_file(tmp_path):
    p = _write(tmp_path / "m.csv", ["missing.ppm,0,0,train"])
    with pytest.raises(ManifestError, match="line 2"):
        sd.load_manifest(p)
    with pytest.raises(StorageError):
        sd.load_manifest(tmp_path / "nope.csv")


def test_manifest_bad_integer(tmp_path):
    p = _write(tmp_path / "m.csv", ["a.ppm,zero,0,train"])
    with pytest.raises(ManifestError, match="line 2"):
        sd.load_manifest(p, check_files=False)


def test_generation_writes_images(tmp_path):
    sd.generate_dataset(2, 2, 4, 2, (20, 24), seed=0, out_dir=tmp_path)
    files = os.listdir(tmp_path / "images")
    assert len(files) == 16
