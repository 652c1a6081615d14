import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ichseg.preprocessing import (BONE, BRAIN, SUBDURAL, AugmentConfig, CropConfig, InputStrategy,
                                  SliceSample, StrategyKind, WindowSpec, apply_window, augment,
                                  build_input, flip, foreground_biased_crop, stack_adjacent_slices)
from ichseg.volume_io import SyntheticSpec, Volume, generate_synthetic_case


def test_window_center_maps_to_half():
    assert apply_window(40.0, WindowSpec(40, 80)) == pytest.approx(0.5)


def test_window_clamps():
    w = WindowSpec(40, 80)
    assert apply_window(w.center - w.width / 2, w) == 0.0
    assert apply_window(-5000, w) == 0.0
    for window in (BRAIN, SUBDURAL, BONE):
        assert apply_window(10_000, window) == 1.0


def test_window_width_must_be_positive():
    with pytest.raises(ValueError):
        WindowSpec(40, 0)


@settings(max_examples=100, deadline=None)
@given(values=arrays(np.float64, 20, elements=st.floats(-3000, 3000)),
       center=st.floats(-500, 500), width=st.floats(1, 3000),
       a=st.floats(0.1, 10), b=st.floats(-100, 100))
def test_window_affine_invariance(values, center, width, a, b):
    lhs = apply_window(values, WindowSpec(center, width))
    rhs = apply_window(a * values + b, WindowSpec(a * center + b, a * width))
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_stack_adjacent_interior_and_edges():
    vol = np.broadcast_to(np.arange(10, dtype=float), (4, 5, 10))
    assert stack_adjacent_slices(vol, 5, 3)[:, 0, 0].tolist() == [4, 5, 6]
    assert stack_adjacent_slices(vol, 0, 3)[:, 0, 0].tolist() == [0, 0, 1]
    assert stack_adjacent_slices(vol, 9, 3)[:, 0, 0].tolist() == [8, 9, 9]
    one = stack_adjacent_slices(vol, 7, 1)
    assert one.shape == (1, 4, 5)
    np.testing.assert_array_equal(one[0], vol[:, :, 7])


def test_stack_adjacent_errors():
    vol = np.zeros((4, 4, 3))
    with pytest.raises(ValueError):
        stack_adjacent_slices(vol, 3, 3)
    with pytest.raises(ValueError):
        stack_adjacent_slices(vol, 0, 2)


def test_strategy_invariants():
    assert InputStrategy.adjacent_slices().n_channels == 3
    assert InputStrategy.multi_window().n_channels == 3
    assert InputStrategy.combined().n_channels == 9
    with pytest.raises(ValueError):
        InputStrategy(StrategyKind.MULTI_WINDOW, (BRAIN,), 1)
    with pytest.raises(ValueError):
        InputStrategy(StrategyKind.COMBINED, (BRAIN, SUBDURAL, BONE), 1)
    for s in (InputStrategy.adjacent_slices(), InputStrategy.combined()):
        assert InputStrategy.from_dict(s.to_dict()) == s


def _volume(seed=0, shape=(16, 16, 6)):
    return generate_synthetic_case(SyntheticSpec(shape=shape), seed)[0]


def test_build_input_channel_counts():
    vol = _volume()
    assert build_input(vol, 2, InputStrategy.adjacent_slices()).shape == (3, 16, 16)
    assert build_input(vol, 2, InputStrategy.multi_window()).shape == (3, 16, 16)
    assert build_input(vol, 2, InputStrategy.combined()).shape == (9, 16, 16)


def test_build_input_combined_is_window_major():
    vol = _volume()
    out = build_input(vol, 0, InputStrategy.combined())
    for w, window in enumerate((BRAIN, SUBDURAL, BONE)):
        for j, s in enumerate((0, 0, 1)):
            np.testing.assert_allclose(out[3 * w + j], apply_window(vol.data[:, :, s], window), atol=1e-6)


def test_build_input_identical_windows_give_identical_channels():
    vol = _volume()
    out = build_input(vol, 3, InputStrategy.multi_window((BRAIN, BRAIN, BRAIN)))
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[1], out[2])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), kind=st.sampled_from(list(StrategyKind)))
def test_build_input_range(seed, kind):
    data = np.random.default_rng(seed).uniform(-2000, 4000, size=(8, 8, 4))
    out = build_input(Volume(data, (1, 1, 1)), seed % 4, InputStrategy.from_name(kind.value))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_crop_output_size(rng):
    img = rng.random((3, 400, 420)).astype(np.float32)
    lbl = np.zeros((400, 420), np.uint8)
    s = foreground_biased_crop(img, lbl, CropConfig(), rng)
    assert s.image.shape == (3, 384, 384) and s.label.shape == (384, 384)


def test_crop_pads_small_slice_centered(rng):
    img = np.ones((3, 256, 256), np.float32)
    lbl = np.ones((256, 256), np.uint8)
    s = foreground_biased_crop(img, lbl, CropConfig(pad_value=-1.0), rng)
    assert s.image.shape == (3, 384, 384)
    np.testing.assert_array_equal(s.image[:, 64:320, 64:320], 1.0)
    assert (s.image[:, :64] == -1.0).all() and (s.image[:, 320:] == -1.0).all()
    assert s.label.sum() == 256 * 256 and s.label[64:320, 64:320].all()


def test_crop_foreground_certain(rng):
    img = np.zeros((1, 512, 512), np.float32)
    lbl = np.zeros((512, 512), np.uint8)
    lbl[500, 7] = 1
    cfg = CropConfig(size=(64, 64), p_foreground=1.0)
    for _ in range(20):
        assert foreground_biased_crop(img, lbl, cfg, rng).label.sum() == 1


def test_crop_foreground_fraction():
    rng = np.random.default_rng(0)
    img = np.zeros((1, 256, 256), np.float32)
    lbl = np.zeros((256, 256), np.uint8)
    lbl[118:138, 120:136] = 1
    cfg = CropConfig(size=(64, 64), p_foreground=0.66)
    hits = sum(foreground_biased_crop(img, lbl, cfg, rng).label.any() for _ in range(1000))
    assert hits / 1000 >= 0.66


def _sample(rng, size=64):
    lbl = np.zeros((size, size), np.uint8)
    lbl[10:30, 20:40] = 1
    return SliceSample(rng.random((3, size, size)).astype(np.float32), lbl, "c", 0)


def test_augment_identity(rng):
    s = _sample(rng)
    out = augment(s, AugmentConfig.identity(), np.random.default_rng(0))
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.label, s.label)


def test_augment_deterministic(rng):
    s = _sample(rng)
    cfg = AugmentConfig(p_patch_shuffle=1.0)
    a = augment(s, cfg, np.random.default_rng(42))
    b = augment(s, cfg, np.random.default_rng(42))
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.label, b.label)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), rot=st.floats(0, 180), p=st.floats(0, 1))
def test_augment_label_binary_and_image_range(seed, rot, p):
    rng = np.random.default_rng(seed)
    s = _sample(rng, 48)
    cfg = AugmentConfig(p_flip=p, rotation_max_deg=rot, scale_range=(0.7, 1.3), noise_std=0.3,
                        p_patch_shuffle=p)
    out = augment(s, cfg, rng)
    assert set(np.unique(out.label)) <= {0, 1}
    assert out.image.shape == s.image.shape and out.label.shape == s.label.shape
    assert out.image.min() >= 0 and out.image.max() <= 1


def test_flip_twice_is_identity(rng):
    s = _sample(rng)
    for axis in (0, 1):
        twice = flip(flip(s, axis), axis)
        np.testing.assert_array_equal(twice.image, s.image)
        np.testing.assert_array_equal(twice.label, s.label)
    np.testing.assert_array_equal(flip(s, 0).label, s.label[::-1])


def test_rotation_moves_label_with_image():
    # image channel == label: any spatial transform must keep them coincident
    lbl = np.zeros((64, 64), np.uint8)
    lbl[8:24, 30:50] = 1
    s = SliceSample(lbl[None].astype(np.float32), lbl, "c", 0)
    cfg = AugmentConfig(p_flip=0.5, rotation_max_deg=40, scale_range=(0.8, 1.2), noise_std=0.0,
                        intensity_scale_range=(1, 1), intensity_shift_range=(0, 0), p_patch_shuffle=0)
    out = augment(s, cfg, np.random.default_rng(3))
    agree = ((out.image[0] > 0.5) == out.label.astype(bool)).mean()
    assert agree > 0.98


def test_patch_shuffle_only_touches_image():
    rng = np.random.default_rng(0)
    s = _sample(rng)
    cfg = AugmentConfig(p_flip=0, rotation_max_deg=0, scale_range=(1, 1), noise_std=0,
                        intensity_scale_range=(1, 1), intensity_shift_range=(0, 0), p_patch_shuffle=1.0)
    out = augment(s, cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(out.label, s.label)
    assert not np.array_equal(out.image, s.image)
    np.testing.assert_allclose(np.sort(out.image.ravel()), np.sort(s.image.ravel()))
