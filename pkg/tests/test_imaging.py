import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from retinastack.imaging import (
    CAMERA_PROFILES,
    AugmentConfig,
    AugmentParams,
    ArchPreset,
    NormalizationStats,
    _pad_crop,
    arch_preset,
    augment,
    camera_profile_for,
    center_crop,
    denormalize_zscore,
    hsv_to_rgb,
    normalize_zscore,
    preprocess,
    read_fens,
    read_image,
    resize_bilinear,
    rgb_to_hsv,
    rotate,
    sample_augment_params,
    square_pad,
    write_fens,
    write_image,
)


def _img(rng, h, w):
    return rng.random((h, w, 3))


def test_square_pad_centers(rng):
    img = _img(rng, 3, 6)
    out = square_pad(img, fill=-1)
    assert out.shape == (6, 6, 3)
    # floor((6 - 3) / 2) = 1 row on top, 2 below
    assert np.all(out[0] == -1) and np.all(out[4:] == -1)
    assert np.array_equal(out[1:4], img)


def test_center_crop(rng):
    img = _img(rng, 7, 9)
    out = center_crop(img, 4)
    assert np.array_equal(out, img[1:5, 2:6])
    with pytest.raises(ValueError):
        center_crop(img, 8)


@given(st.integers(1, 12), st.integers(1, 12), st.data())
def test_fused_pad_crop_matches_composition(h, w, data):
    crop = data.draw(st.integers(1, max(h, w)))
    img = np.random.default_rng(h * 100 + w).random((h, w, 3))
    assert np.array_equal(_pad_crop(img, crop, 0.0), center_crop(square_pad(img), crop))


def _resize_oracle(img, oh, ow):
    h, w, _ = img.shape
    out = np.empty((oh, ow, 3))
    for i in range(oh):
        y = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1)
        y0 = int(np.floor(y)); y1 = min(y0 + 1, h - 1); ty = y - y0
        for j in range(ow):
            x = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1)
            x0 = int(np.floor(x)); x1 = min(x0 + 1, w - 1); tx = x - x0
            top = (1 - tx) * img[y0, x0] + tx * img[y0, x1]
            bot = (1 - tx) * img[y1, x0] + tx * img[y1, x1]
            out[i, j] = (1 - ty) * top + ty * bot
    return out


@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9))
def test_resize_matches_per_pixel_oracle(h, w, oh, ow):
    img = np.random.default_rng(h + 10 * w).random((h, w, 3))
    assert np.allclose(resize_bilinear(img, (oh, ow)), _resize_oracle(img, oh, ow), atol=1e-12)


def test_resize_constant_and_identity(rng):
    img = _img(rng, 5, 5)
    assert np.allclose(resize_bilinear(img, 5), img, atol=0)
    const = np.full((7, 3, 3), 0.25)
    assert np.allclose(resize_bilinear(const, (4, 11)), 0.25, atol=1e-15)


def test_zscore_roundtrip(rng):
    img = _img(rng, 4, 4)
    z = normalize_zscore(img)
    assert np.allclose(z[0, 0], (img[0, 0] - np.array([0.485, 0.456, 0.406])) / np.array([0.229, 0.224, 0.225]))
    assert np.allclose(denormalize_zscore(z), img, atol=1e-12)
    with pytest.raises(ValueError):
        NormalizationStats(std=(1.0, 0.0, 1.0))


@pytest.mark.parametrize("dims", sorted(CAMERA_PROFILES))
def test_camera_geometry_full_size(dims):
    w, h = dims
    cam = camera_profile_for(w, h)
    img = np.zeros((h, w, 3), dtype=np.float32)
    padded = square_pad(img)
    assert padded.shape == (max(w, h), max(w, h), 3)
    cropped = center_crop(padded, cam.crop_size)
    assert cropped.shape == (cam.crop_size, cam.crop_size, 3)
    del padded
    for name in ("densenet201", "inceptionv3", "efficientnetb4"):
        size = arch_preset(name).input_size
        assert preprocess(img, cam, arch_preset(name)).shape == (size, size, 3)


def test_preprocess_equals_explicit_chain(rng):
    img = _img(rng, 30, 50)
    from retinastack.imaging import CameraProfile
    cam = CameraProfile(50, 30, 40)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = preprocess(img, cam, ArchPreset("t", 16))
    ref = normalize_zscore(resize_bilinear(center_crop(square_pad(img), 40), 16))
    assert np.array_equal(out, ref)


def test_preprocess_warnings(rng):
    img = _img(rng, 10, 12)
    with pytest.warns(UserWarning, match="no camera profile"):
        out = preprocess(img, None, ArchPreset("t", 8))
    assert out.shape == (8, 8, 3)
    cam = CAMERA_PROFILES[(2048, 1536)]
    with pytest.warns(UserWarning, match="does not match camera"):
        preprocess(_img(rng, 1536, 1600), cam, ArchPreset("t", 8))
    with pytest.raises(ValueError):
        preprocess(_img(rng, 1536, 1600), cam, ArchPreset("t", 8), strict=True)


def test_arch_presets():
    assert arch_preset("DenseNet201").input_size == 224
    assert arch_preset("densenet201", literal_244=True).input_size == 244
    assert arch_preset("efficientnetb4", literal_244=True).input_size == 380
    with pytest.raises(KeyError):
        arch_preset("vgg16")


# -- augmentation -------------------------------------------------------------

def test_identity_is_bit_exact(rng):
    img = _img(rng, 9, 7)
    assert np.array_equal(augment(img, AugmentParams()), img)
    p = sample_augment_params(3, AugmentConfig.identity())
    assert p.is_identity
    assert np.array_equal(augment(img, p), img)


@given(st.integers(0, 2**32 - 1))
def test_flip_involution(seed):
    img = np.random.default_rng(seed).random((6, 5, 3))
    for p in (AugmentParams(flip_h=True), AugmentParams(flip_v=True), AugmentParams(flip_h=True, flip_v=True)):
        assert np.allclose(augment(augment(img, p), p), img, atol=1e-6)


def test_rotation_quarter_turns(rng):
    img = _img(rng, 8, 8)
    assert np.array_equal(rotate(img, 90), np.rot90(img))
    assert np.array_equal(rotate(img, 180), img[::-1, ::-1])
    out = img
    for _ in range(4):
        out = rotate(out, 90)
    assert np.allclose(out, img, atol=1e-6)
    assert np.array_equal(rotate(img, 360), img)


def test_rotation_fill_outside(rng):
    img = np.ones((9, 9, 3))
    out = rotate(img, 45, fill=0.0)
    assert out[0, 0].tolist() == [0.0, 0.0, 0.0]
    assert np.allclose(out[4, 4], 1.0)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_hsv_roundtrip(r, g, b):
    rgb = np.array([[[r, g, b]]])
    assert np.allclose(hsv_to_rgb(rgb_to_hsv(rgb)), rgb, atol=1e-12)


def test_full_hue_turn_is_identity(rng):
    img = _img(rng, 5, 5)
    assert np.allclose(augment(img, AugmentParams(hue_delta=1.0)), img, atol=1e-6)


def test_color_ops_stay_in_range(rng):
    img = _img(rng, 6, 6)
    p = AugmentParams(brightness_delta=0.5, contrast_factor=3.0, saturation_factor=4.0, hue_delta=0.3)
    out = augment(img, p)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_brightness_and_contrast_formulas(rng):
    img = _img(rng, 4, 4) * 0.5 + 0.25
    out = augment(img, AugmentParams(brightness_delta=0.1))
    assert np.allclose(out, img + 0.1)
    out = augment(img, AugmentParams(contrast_factor=0.5))
    mean = img.mean(axis=(0, 1))
    assert np.allclose(out, (img - mean) * 0.5 + mean)


@given(st.integers(0, 2**63))
def test_sampled_params_in_range(seed):
    c = AugmentConfig()
    p = sample_augment_params(seed, c)
    assert p == sample_augment_params(seed, c)
    assert 0 <= p.rotation <= 360
    assert -0.1 <= p.brightness_delta <= 0.1
    assert 0.9 <= p.contrast_factor <= 1.1 and 0.9 <= p.saturation_factor <= 1.1
    assert -0.05 <= p.hue_delta <= 0.05


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(rotation=(10, 0))
    with pytest.raises(ValueError):
        AugmentConfig(flip_h_prob=1.5)


# -- file formats -------------------------------------------------------------

def test_png_roundtrip(tmp_path, rng):
    img = np.round(_img(rng, 5, 7) * 255) / 255
    write_image(img, tmp_path / "a.png")
    assert np.array_equal(read_image(tmp_path / "a.png"), img)


def test_ppm_and_rgba(tmp_path):
    from PIL import Image
    arr = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4) * 5
    Image.fromarray(arr[..., :3]).save(tmp_path / "a.ppm")
    assert np.array_equal(read_image(tmp_path / "a.ppm"), arr[..., :3] / 255.0)
    Image.fromarray(arr).save(tmp_path / "b.png")
    assert np.array_equal(read_image(tmp_path / "b.png"), arr[..., :3] / 255.0)
    Image.fromarray(arr[..., :3]).save(tmp_path / "c.jpg")
    with pytest.raises(ValueError, match="unsupported"):
        read_image(tmp_path / "c.jpg")


def test_fens_roundtrip(tmp_path, rng):
    t = rng.normal(size=(4, 5, 3))
    write_fens(tmp_path / "t.fens", t)
    raw = (tmp_path / "t.fens").read_bytes()
    assert raw[:4] == b"FENS" and len(raw) == 16 + 4 * t.size
    assert np.array_equal(read_fens(tmp_path / "t.fens"), t.astype(np.float32))
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        read_fens(tmp_path / "bad")
