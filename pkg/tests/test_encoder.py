import numpy as np
import pytest

from augopt.encoder import (EncoderSpec, FeatureMap, ReferenceEncoder, downsample_mask, downsample_mask_adjoint,
                            encode, infer_stride, load_features, save_features)
from augopt.errors import DataError, FormatError


def test_deterministic_across_instances(rng):
    img = rng.random((16, 16))
    a = ReferenceEncoder(EncoderSpec(seed=3)).encode(img).data
    b = ReferenceEncoder(EncoderSpec(seed=3)).encode(img).data
    assert np.array_equal(a, b)


def test_shape_and_stride():
    fm = encode(np.zeros((16, 16)), EncoderSpec(levels=2))
    assert fm.data.shape == (34, 4, 4) and fm.stride == 4


def test_constant_image_has_no_texture_response():
    fm = encode(np.full((16, 16), 0.7))
    assert np.allclose(fm.data[:32], 0.0, atol=1e-12)
    assert np.allclose(fm.data[32], 0.7)
    assert np.allclose(fm.data[33], 0.0)


def test_channel_stack_for_256_image(rng):
    fm = encode(rng.random((256, 256)), EncoderSpec(bank_size=62, levels=3))
    assert fm.data.shape == (64, 32, 32) and fm.stride == 8


def test_save_load_byte_round_trip(tmp_path, rng):
    spec = EncoderSpec(kind="file", feature_dir=str(tmp_path))
    fm = FeatureMap(rng.random((5, 4, 4)).astype(np.float32), 4)
    save_features(tmp_path / "img.augf", fm)
    back = load_features("img", spec, (16, 16))
    assert back.stride == 4
    save_features(tmp_path / "again.augf", back)
    assert (tmp_path / "img.augf").read_bytes() == (tmp_path / "again.augf").read_bytes()


def test_load_inconsistent_grid(tmp_path):
    spec = EncoderSpec(kind="file", feature_dir=str(tmp_path))
    save_features(tmp_path / "img.augf", FeatureMap(np.zeros((2, 3, 5), dtype=np.float32), 1))
    with pytest.raises(FormatError):
        load_features("img", spec, (16, 16))
    with pytest.raises(DataError, match="missing"):
        load_features("nope", spec, (16, 16))


def test_infer_stride():
    assert infer_stride((32, 32), (256, 256)) == 8
    assert infer_stride((4, 4), (17, 17)) == 4
    with pytest.raises(DataError):
        infer_stride((4, 8), (16, 16))


def test_downsample_mask_examples():
    mask = np.zeros((4, 4))
    mask[:2, :2] = 1
    mask[2, 2] = 1
    assert np.array_equal(downsample_mask(mask, 2), [[1.0, 0.0], [0.0, 0.25]])
    assert downsample_mask(np.ones((5, 5)), 2).shape == (2, 2)
    with pytest.raises(DataError):
        downsample_mask(mask, 0)


def test_downsample_adjoint(rng):
    x = rng.random((3, 9, 10))
    g = rng.random((3, 4, 5))
    lhs = (downsample_mask(x, 2) * g).sum()
    rhs = (x * downsample_mask_adjoint(g, 2, (9, 10))).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_shift_covariance_away_from_border(rng):
    enc = ReferenceEncoder(EncoderSpec(levels=2))
    img = rng.random((32, 40))
    a = enc.encode(img[:, :32]).data
    b = enc.encode(img[:, 4:36]).data  # shifted right by one feature cell
    assert np.allclose(a[:, 1:-1, 2:-1], b[:, 1:-1, 1:-2], atol=1e-12)


def test_backward_matches_finite_difference(rng):
    enc = ReferenceEncoder(EncoderSpec(bank_size=8, levels=1))
    x = rng.random((2, 10, 12))
    u = rng.standard_normal((2, 10, 5, 6))
    feats, cache = enc.forward(x)
    grad = enc.backward(cache, u)
    direction = rng.standard_normal(x.shape)
    h = 1e-6
    plus = (enc.forward(x + h * direction)[0] * u).sum()
    minus = (enc.forward(x - h * direction)[0] * u).sum()
    numeric = (plus - minus) / (2 * h)
    assert (grad * direction).sum() == pytest.approx(numeric, rel=1e-6)


def test_spec_validation():
    with pytest.raises(DataError):
        EncoderSpec(kind="file")
    with pytest.raises(DataError):
        EncoderSpec(kind="cnn")
    with pytest.raises(DataError):
        ReferenceEncoder(EncoderSpec(kind="file", feature_dir="x"))
