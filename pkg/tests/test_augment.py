import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reidrecipe import augment as aug
from reidrecipe.errors import ValidationError


def img(h, w, seed=0):
    return np.random.default_rng(seed).uniform(size=(3, h, w)).astype(np.float32)


@pytest.mark.parametrize("h, w, m, expected", [(256, 128, 416, (416, 208)), (100, 37, 200, (200, 74)),
                                               (37, 100, 200, (74, 200)), (64, 30, 64, (64, 30))])
def test_resize_largest_side_examples(h, w, m, expected):
    assert aug.resize_largest_side(img(h, w), m).shape[1:] == expected


def test_resize_same_size_is_copy():
    x = img(64, 30)
    y = aug.resize_largest_side(x, 64)
    np.testing.assert_array_equal(x, y)
    assert y is not x


@given(h=st.integers(1, 400), w=st.integers(1, 400), m=st.integers(16, 500))
def test_resize_preserves_aspect_within_a_pixel(h, w, m):
    oh, ow = aug.largest_side_shape(h, w, m)
    assert max(oh, ow) == m
    if h >= w:
        assert abs(ow - w * m / h) <= 1
    else:
        assert abs(oh - h * m / w) <= 1


def test_resize_constant_stays_constant():
    x = np.full((3, 17, 9), 0.3, np.float32)
    np.testing.assert_allclose(aug.resize(x, 40, 23), 0.3, atol=1e-7)


def test_resize_rejects_tiny_target():
    with pytest.raises(ValidationError):
        aug.resize_largest_side(img(20, 10), 8)


def test_cutout_zero_fraction_unchanged(rng):
    x = img(32, 16)
    np.testing.assert_array_equal(aug.cutout(x, 0.0, rng), x)


def test_cutout_outside_rect_bit_identical(rng):
    x = img(64, 32)
    for _ in range(50):
        out, rect = aug.cutout(x, 0.25, rng, return_rect=True)
        mask = np.zeros(x.shape[1:], bool)
        if rect is not None:
            r0, r1, c0, c1 = rect
            mask[r0:r1, c0:c1] = True
        np.testing.assert_array_equal(out[:, ~mask], x[:, ~mask])


def test_cutout_mean_fraction_monte_carlo():
    rng = np.random.default_rng(7)
    h, w = 128, 64
    fracs = []
    for _ in range(1000):
        rect = aug.cutout_rect(h, w, 0.25, rng)
        fracs.append(0.0 if rect is None else (rect[1] - rect[0]) * (rect[3] - rect[2]) / (h * w))
    assert abs(np.mean(fracs) - 0.125) <= 0.02


@given(f=st.floats(0.0, 0.5), h=st.integers(4, 80), w=st.integers(4, 80), seed=st.integers(0, 10_000))
def test_cutout_area_bound(f, h, w, seed):
    x = np.full((3, h, w), -1.0, np.float32)  # noise lies in [0,1) so every changed pixel shows
    out = aug.cutout(x, f, np.random.default_rng(seed))
    changed = int(np.any(out != x, axis=0).sum())
    # rounding each side to the nearest pixel adds at most one row and one column
    assert changed <= f * h * w + h + w + 1


def test_cutout_rejects_large_fraction(rng):
    with pytest.raises(ValidationError):
        aug.cutout(img(8, 8), 0.6, rng)


def test_schedule_examples():
    s = aug.CutoutSchedule(0.0, 0.4, 1024)
    assert aug.schedule_value(s, 0) == 0.0
    assert aug.schedule_value(s, 1024) == 0.4
    assert aug.schedule_value(s, 512) == pytest.approx(0.2)
    t = aug.CutoutSchedule(0.1, 0.3, 10)
    assert aug.schedule_value(t, 0) == 0.1


@given(a=st.floats(0, 0.5), b=st.floats(0, 0.5), total=st.integers(1, 5000),
       its=st.lists(st.integers(0, 20_000), min_size=2, max_size=20))
def test_schedule_monotone_and_clamped(a, b, total, its):
    lo, hi = min(a, b), max(a, b)
    s = aug.CutoutSchedule(lo, hi, total)
    values = [aug.schedule_value(s, i) for i in sorted(its)]
    assert all(x <= y + 1e-15 for x, y in zip(values, values[1:]))
    assert all(lo - 1e-15 <= v <= hi + 1e-15 for v in values)
    assert aug.schedule_value(s, total + 100) == pytest.approx(hi)


def test_schedule_validation():
    with pytest.raises(ValidationError):
        aug.CutoutSchedule(0.3, 0.1)
    with pytest.raises(ValidationError):
        aug.CutoutSchedule(0.0, 0.6)


def test_hflip_involution():
    x = img(9, 7)
    np.testing.assert_array_equal(aug.hflip(aug.hflip(x)), x)
    np.testing.assert_array_equal(aug.hflip(x)[:, :, 0], x[:, :, -1])


def test_random_crop_examples(rng):
    x = img(30, 14)
    np.testing.assert_array_equal(aug.random_crop(x, 1.0, rng), x)
    const = np.full((3, 30, 14), 0.6, np.float32)
    out = aug.random_crop(const, 0.5, rng)
    assert out.shape == const.shape
    np.testing.assert_allclose(out, 0.6, atol=1e-7)


def test_random_resized_crop_shape(rng):
    assert aug.random_resized_crop(img(90, 40), 32, rng).shape == (3, 32, 32)
