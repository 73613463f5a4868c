import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from augopt import formats
from augopt.errors import FormatError

shapes = st.tuples(st.integers(2, 9), st.integers(2, 9))


@given(arrays(np.float32, shapes, elements=st.floats(0, 1, width=32)))
def test_image_round_trip_bit_exact(img):
    buf = formats.encode_image(img)
    back = formats.decode_image(buf)
    assert np.array_equal(back.astype(np.float32), img)
    assert formats.encode_image(back) == buf


@given(arrays(np.uint32, shapes, elements=st.integers(0, 2**32 - 1)))
def test_label_round_trip(labels):
    buf = formats.encode_labels(labels)
    assert formats.encode_labels(formats.decode_labels(buf)) == buf


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-10, 10, width=32)))
def test_feature_round_trip(data):
    buf = formats.encode_features(data)
    assert formats.encode_features(formats.decode_features(buf)) == buf


def test_truncated_feature_file_names_expected_bytes():
    buf = formats.encode_features(np.zeros((2, 3, 3), dtype=np.float32))
    with pytest.raises(FormatError, match=str(len(buf))):
        formats.decode_features(buf[:-5])


def test_bad_magic():
    buf = formats.encode_image(np.zeros((2, 2)))
    with pytest.raises(FormatError, match="magic"):
        formats.decode_labels(buf)


def test_pgm_read_normalizes(tmp_path):
    raster = np.array([[0, 255], [51, 102]], dtype=np.uint8)
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5\n# comment\n2 2\n255\n" + raster.tobytes())
    assert np.allclose(formats.read_image(path), raster / 255.0)


def test_pgm_write_read(tmp_path):
    img = np.array([[0.0, 1.0], [0.2, 0.4]])
    formats.write_image(tmp_path / "x.pgm", img)
    assert np.allclose(formats.read_image(tmp_path / "x.pgm"), img)


def test_list_images_sorted_and_filtered(tmp_path):
    for name in ["b.augi", "a.pgm", "c.txt"]:
        (tmp_path / name).write_bytes(b"")
    assert [p.name for p in formats.list_images(tmp_path)] == ["a.pgm", "b.augi"]
