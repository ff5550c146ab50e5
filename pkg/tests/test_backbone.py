import numpy as np
import pytest

from cascadetrack.backbone import (
    BackboneParams,
    ImagePatch,
    crop_region,
    extract_features,
    fuse_features,
    fused_features,
    load_image,
)
from cascadetrack.geometry import Box
from cascadetrack.pnm import write_pnm
from cascadetrack.synth import make_texture
from cascadetrack.tensor import DenseLayerParams, FeatureMap, ShapeError, resize_bilinear


def _texture_patch(size=128, seed=3):
    t = make_texture(seed, size)
    return ImagePatch(t.astype(np.float32))


def test_image_patch_validation():
    with pytest.raises(ValueError):
        ImagePatch(np.full((4, 4), 1.5, np.float32))
    with pytest.raises(ShapeError):
        ImagePatch(np.zeros((2, 4, 4), np.float32))
    p = ImagePatch(np.zeros((4, 5), np.float32))
    assert (p.channels, p.height, p.width) == (1, 4, 5)


def test_load_image_round_trip(tmp_path):
    pix = (np.arange(48).reshape(6, 8) * 5).astype(np.uint8)
    write_pnm(tmp_path / "a.pgm", pix)
    img = load_image(tmp_path / "a.pgm")
    assert np.array_equal(img.to_uint8()[0], pix)


def test_crop_of_uniform_image_is_uniform():
    img = ImagePatch(np.full((100, 120), 0.4, np.float32))
    patch, _ = crop_region(img, Box(60, 50, 20, 20), 2.0, 64)
    assert patch.data.shape == (1, 64, 64)
    assert np.allclose(patch.data, 0.4, atol=1e-6)


def test_crop_pads_with_image_mean():
    rng = np.random.Generator(np.random.PCG64(0))
    data = rng.uniform(0, 1, (80, 80)).astype(np.float32)
    img = ImagePatch(data)
    patch, tx = crop_region(img, Box(0, 0, 20, 20), 4.0, 64)
    # the top-left quadrant of the crop lies entirely outside the image
    assert np.allclose(patch.data[0, :28, :28], data.mean(), atol=1e-5)


def test_crop_back_projection_recovers_box():
    img = ImagePatch(np.zeros((200, 300), np.float32))
    box = Box(123.4, 77.7, 31.0, 45.5)
    _, tx = crop_region(img, box, 4.0, 256)
    back = tx.box_to_image(tx.box_to_patch(box))
    assert np.abs(back.as_array() - box.as_array()).max() <= 1e-6
    pb = tx.box_to_patch(box)
    assert (pb.cx, pb.cy) == pytest.approx((128, 128))
    arr = tx.array_to_image(np.array([pb.as_array()]))
    assert arr[0] == pytest.approx(box.as_array(), abs=1e-6)


def test_crop_preconditions():
    img = ImagePatch(np.zeros((50, 50), np.float32))
    with pytest.raises(ValueError):
        crop_region(img, Box(10, 10, 5, 5), 0.5, 64)
    with pytest.raises(ValueError):
        crop_region(img, Box(10, 10, 5, 5), 2.0, 60)


def test_uniform_patch_has_zero_gradients():
    phi3, phi4 = extract_features(ImagePatch(np.full((64, 64), 0.3, np.float32)), BackboneParams())
    assert np.all(phi3.data[1:] == 0.0) and np.all(phi4.data[1:] == 0.0)
    assert np.allclose(phi3.data[0], 0.3 - 0.5)


def test_feature_strides_and_sizes():
    phi3, phi4 = extract_features(_texture_patch(128), BackboneParams())
    assert (phi3.stride, phi4.stride) == (8, 16)
    assert phi3.data.shape == (8, 16, 16) and phi4.data.shape == (8, 8, 8)
    fused = fuse_features(phi3, phi4, BackboneParams())
    assert fused.stride == 16 and fused.data.shape == (8, 8, 8)


def test_features_require_multiple_of_16():
    with pytest.raises(ValueError):
        extract_features(ImagePatch(np.zeros((40, 48), np.float32)), BackboneParams())


def test_shift_by_one_cell_shifts_phi4():
    tex = make_texture(11, 192)
    a = ImagePatch(tex[:128, :128].astype(np.float32))
    b = ImagePatch(tex[:128, 16:144].astype(np.float32))
    fa = extract_features(a, BackboneParams())[1].data
    fb = extract_features(b, BackboneParams())[1].data
    # np.gradient is one-sided on the border, so the outermost columns differ
    assert np.array_equal(fa[:, :, 2:-1], fb[:, :, 1:-2])


def test_deterministic():
    p = _texture_patch()
    for params in (BackboneParams(), BackboneParams(mode="seeded-random-conv", seed=5)):
        a, b = fused_features(p, params), fused_features(p, params)
        assert np.array_equal(a.data, b.data)


def test_constant_offset_changes_only_intensity_channel():
    t = make_texture(4, 64) * 0.8
    a = extract_features(ImagePatch(t.astype(np.float32)), BackboneParams())[0].data
    b = extract_features(ImagePatch((t + 0.1).astype(np.float32)), BackboneParams())[0].data
    assert np.allclose(a[1:], b[1:], atol=1e-5)
    assert np.allclose(b[0] - a[0], 0.1, atol=1e-5)


def test_identity_fusion_on_duplicated_inputs():
    c = 8
    w = np.zeros((2 * c, 2 * c), np.float32)
    w[np.arange(2 * c), np.arange(2 * c)] = 1.0
    params = BackboneParams(fusion=DenseLayerParams.conv1x1(w[:c]))
    phi3, phi4 = extract_features(_texture_patch(), BackboneParams())
    out = fuse_features(phi3, phi4, params)
    want = resize_bilinear(phi3, phi4.height, phi4.width)
    assert np.allclose(out.data, want.data, atol=1e-6)


def test_fused_uniform_patch_is_constant_per_channel():
    f = fused_features(ImagePatch(np.full((128, 128), 0.6, np.float32)), BackboneParams())
    flat = f.data.reshape(f.channels, -1)
    assert np.allclose(flat, flat[:, :1], atol=1e-7)


def test_fusion_channel_mismatch():
    phi3, phi4 = extract_features(_texture_patch(), BackboneParams())
    with pytest.raises(ShapeError):
        fuse_features(FeatureMap(phi3.data[:4], 8.0), phi4, BackboneParams())
    with pytest.raises(ShapeError):
        BackboneParams(fusion=DenseLayerParams.conv1x1(np.zeros((8, 10), np.float32)))


def test_random_conv_mode_shapes():
    phi3, phi4 = extract_features(_texture_patch(128), BackboneParams(mode="seeded-random-conv", seed=1))
    assert phi3.data.shape == (8, 16, 16) and phi4.data.shape == (8, 8, 8)
    assert (phi3.stride, phi4.stride) == (8, 16)
