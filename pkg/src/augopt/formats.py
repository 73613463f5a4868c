"""Binary file formats: images (AUGI / PGM), superpixel labels (AUGS), features (AUGF).

All multi-byte fields are little-endian. Layouts::

    AUGI  magic | u32 H | u32 W | H*W float32
    AUGS  magic | u32 H | u32 W | H*W u32 labels
    AUGF  magic | u32 C | u32 H' | u32 W' | C*H'*W' float32
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import FormatError

IMAGE_MAGIC = b"AUGI"
LABEL_MAGIC = b"AUGS"
FEATURE_MAGIC = b"AUGF"
IMAGE_SUFFIXES = (".augi", ".pgm")


def _read_header(buf: bytes, magic: bytes, ndims: int, path) -> tuple[int, ...]:
    head = 4 + 4 * ndims
    if len(buf) < head:
        raise FormatError(f"{path}: truncated header, expected at least {head} bytes, got {len(buf)}")
    if buf[:4] != magic:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    return tuple(int(v) for v in np.frombuffer(buf, dtype="<u4", count=ndims, offset=4))


def _payload(buf: bytes, dims: tuple[int, ...], dtype: str, path) -> np.ndarray:
    offset = 4 + 4 * len(dims)
    count = int(np.prod(dims))
    expected = offset + 4 * count
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims)


def encode_image(image: np.ndarray) -> bytes:
    h, w = image.shape
    return IMAGE_MAGIC + np.array([h, w], dtype="<u4").tobytes() + np.asarray(image, dtype="<f4").tobytes()


def decode_image(buf: bytes, path="<bytes>") -> np.ndarray:
    if buf[:2] == b"P5":
        return _decode_pgm(buf, path)
    dims = _read_header(buf, IMAGE_MAGIC, 2, path)
    data = _payload(buf, dims, "<f4", path).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite pixel values")
    return data


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _decode_pgm(buf: bytes, path) -> np.ndarray:
    pos = 2
    fields = []
    for _ in range(3):
        m = _PGM_TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"{path}: malformed PGM header")
        fields.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = fields
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    pos += 1  # single whitespace byte before the raster
    raster = buf[pos:pos + width * height]
    if len(raster) != width * height:
        raise FormatError(f"{path}: expected {width * height} raster bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).astype(np.float64) / 255.0


def encode_pgm(image: np.ndarray) -> bytes:
    h, w = image.shape
    raster = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode() + raster.tobytes()


def read_image(path) -> np.ndarray:
    path = Path(path)
    return decode_image(path.read_bytes(), path)


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    data = encode_pgm(image) if path.suffix.lower() == ".pgm" else encode_image(image)
    path.write_bytes(data)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def encode_labels(labels: np.ndarray) -> bytes:
    h, w = labels.shape
    return LABEL_MAGIC + np.array([h, w], dtype="<u4").tobytes() + np.asarray(labels, dtype="<u4").tobytes()


def decode_labels(buf: bytes, path="<bytes>") -> np.ndarray:
    dims = _read_header(buf, LABEL_MAGIC, 2, path)
    return _payload(buf, dims, "<u4", path).astype(np.int64)


def read_labels(path) -> np.ndarray:
    path = Path(path)
    return decode_labels(path.read_bytes(), path)


def write_labels(path, labels: np.ndarray) -> None:
    Path(path).write_bytes(encode_labels(labels))


def encode_features(data: np.ndarray) -> bytes:
    c, h, w = data.shape
    return FEATURE_MAGIC + np.array([c, h, w], dtype="<u4").tobytes() + np.asarray(data, dtype="<f4").tobytes()


def decode_features(buf: bytes, path="<bytes>") -> np.ndarray:
    dims = _read_header(buf, FEATURE_MAGIC, 3, path)
    return _payload(buf, dims, "<f4", path).copy()
