"""Feature maps for similarity estimation.

The reference encoder is a frozen random filter bank: ``bank_size`` 5x5
filters drawn once from a seeded standard normal (each then centered to zero
mean and scaled to unit norm, so flat regions give no response and no filter
dominates), absolute value, then
``levels`` rounds of 2x average pooling. Raw intensity and gradient magnitude
are pooled the same way and appended as the last two channels. It exposes a
batched forward pass and its linearized adjoint so gradients can reach the
augmentation parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import formats
from .errors import DataError, FormatError

KERNEL = 5


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "reference"
    seed: int = 0
    bank_size: int = 32
    levels: int = 2
    feature_dir: str | None = None

    def __post_init__(self):
        if self.kind not in ("reference", "file"):
            raise DataError(f"encoder kind must be 'reference' or 'file', got {self.kind!r}")
        if self.kind == "file" and not self.feature_dir:
            raise DataError("file encoder needs feature_dir")
        if self.bank_size < 1 or self.levels < 0:
            raise DataError("bank_size must be >= 1 and levels >= 0")


@dataclass
class FeatureMap:
    data: np.ndarray
    stride: int
    source_shape: tuple[int, int] | None = field(default=None)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DataError(f"feature data must be C x H' x W', got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("feature map has non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def pool2(x: np.ndarray) -> np.ndarray:
    """2x average pool over the last two axes; a trailing odd row/column is dropped."""
    h, w = x.shape[-2] // 2, x.shape[-1] // 2
    x = x[..., : 2 * h, : 2 * w]
    return x.reshape(*x.shape[:-2], h, 2, w, 2).mean(axis=(-3, -1))


def _pool2_last(x: np.ndarray) -> np.ndarray:
    """2x average pool of a channel-last batch (n, H, W, C)."""
    n, H, W, c = x.shape
    h, w = H // 2, W // 2
    return x[:, : 2 * h, : 2 * w].reshape(n, h, 2, w, 2, c).mean(axis=(2, 4))


def _pool2_last_adjoint(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    n, h, w, c = g.shape
    out = np.zeros((n, *shape, c))
    out[:, : 2 * h, : 2 * w].reshape(n, h, 2, w, 2, c)[...] = 0.25 * g[:, :, None, :, None, :]
    return out


def _fold_edges(padded: np.ndarray, r: int) -> np.ndarray:
    """Adjoint of edge-replicate padding by ``r`` on the last two axes."""
    p = padded.copy()
    p[:, r, :] += p[:, :r, :].sum(axis=1)
    p[:, -r - 1, :] += p[:, -r:, :].sum(axis=1)
    p[:, :, r] += p[:, :, :r].sum(axis=2)
    p[:, :, -r - 1] += p[:, :, -r:].sum(axis=2)
    return p[:, r:-r, r:-r]


class ReferenceEncoder:
    def __init__(self, spec: EncoderSpec = EncoderSpec()):
        if spec.kind != "reference":
            raise DataError("ReferenceEncoder needs a reference EncoderSpec")
        self.spec = spec
        bank = np.random.default_rng(spec.seed).standard_normal((spec.bank_size, KERNEL, KERNEL))
        bank = bank.reshape(spec.bank_size, -1)
        bank -= bank.mean(axis=1, keepdims=True)
        bank /= np.linalg.norm(bank, axis=1, keepdims=True)
        self.filters = bank.T.copy()  # (25, bank)

    @property
    def stride(self) -> int:
        return 2 ** self.spec.levels

    @property
    def channels(self) -> int:
        return self.spec.bank_size + 2

    def forward(self, images: np.ndarray):
        """Features (n, C, h', w') for a batch (n, H, W), plus a cache for :meth:`backward`."""
        images = np.asarray(images, dtype=np.float64)
        n, h, w = images.shape
        r = KERNEL // 2
        padded = np.pad(images, ((0, 0), (r, r), (r, r)), mode="edge")
        patches = sliding_window_view(padded, (KERNEL, KERNEL), axis=(1, 2)).reshape(-1, KERNEL * KERNEL)
        resp = (patches @ self.filters).reshape(n, h, w, -1)
        inner = padded[:, r - 1: h + r + 1, r - 1: w + r + 1]
        gx = 0.5 * (inner[:, 1:-1, 2:] - inner[:, 1:-1, :-2])
        gy = 0.5 * (inner[:, 2:, 1:-1] - inner[:, :-2, 1:-1])
        gmag = np.sqrt(gx * gx + gy * gy)
        stack = np.concatenate([np.abs(resp), images[..., None], gmag[..., None]], axis=-1)
        shapes = []
        for _ in range(self.spec.levels):
            shapes.append(stack.shape[1:3])
            stack = _pool2_last(stack)
        return stack.transpose(0, 3, 1, 2), (resp, gx, gy, gmag, shapes)

    def backward(self, cache, upstream: np.ndarray) -> np.ndarray:
        """Adjoint of the linearized encoder: d<upstream, features>/d(images)."""
        resp, gx, gy, gmag, shapes = cache
        n, h, w, bank = resp.shape
        g = np.asarray(upstream, dtype=np.float64).transpose(0, 2, 3, 1)
        for shape in reversed(shapes):
            g = _pool2_last_adjoint(g, shape)
        d_patch = ((g[..., :bank] * np.sign(resp)).reshape(-1, bank) @ self.filters.T)
        d_patch = d_patch.reshape(n, h, w, KERNEL, KERNEL)
        r = KERNEL // 2
        d_pad = np.zeros((n, h + 2 * r, w + 2 * r))
        for dy in range(KERNEL):
            for dx in range(KERNEL):
                d_pad[:, dy: dy + h, dx: dx + w] += d_patch[..., dy, dx]
        safe = np.where(gmag > 0, gmag, 1.0)
        d_g = np.where(gmag > 0, 0.5 * g[..., bank + 1] / safe, 0.0)
        d_gx, d_gy = d_g * gx, d_g * gy
        d_pad[:, r: r + h, r + 1: r + w + 1] += d_gx
        d_pad[:, r: r + h, r - 1: r + w - 1] -= d_gx
        d_pad[:, r + 1: r + h + 1, r: r + w] += d_gy
        d_pad[:, r - 1: r + h - 1, r: r + w] -= d_gy
        out = _fold_edges(d_pad, r)
        out += g[..., bank]
        return out

    def encode(self, image) -> FeatureMap:
        image = np.asarray(image, dtype=np.float64)
        feats, _ = self.forward(image[None])
        return FeatureMap(feats[0], self.stride, image.shape)


def encode(image, spec: EncoderSpec = EncoderSpec()) -> FeatureMap:
    return get_encoder(spec).encode(image)


@lru_cache(maxsize=8)
def get_encoder(spec: EncoderSpec) -> ReferenceEncoder:
    return ReferenceEncoder(spec)


def infer_stride(feature_shape: tuple[int, int], image_shape: tuple[int, int]) -> int:
    (fh, fw), (h, w) = feature_shape, image_shape
    if fh < 1 or fw < 1:
        raise DataError(f"empty feature grid {feature_shape}")
    stride = h // fh
    if stride < 1 or w // fw != stride or not (fh * stride <= h < (fh + 1) * stride) \
            or not (fw * stride <= w < (fw + 1) * stride):
        raise DataError(f"feature grid {feature_shape} is inconsistent with image {image_shape}")
    return stride


def feature_path(spec: EncoderSpec, image_id: str) -> Path:
    return Path(spec.feature_dir) / f"{image_id}.augf"


def save_features(path, fm: FeatureMap) -> None:
    Path(path).write_bytes(formats.encode_features(fm.data))


def load_features(image_id: str, spec: EncoderSpec, image_shape: tuple[int, int] | None = None) -> FeatureMap:
    if spec.kind != "file":
        raise DataError("load_features needs a file EncoderSpec")
    path = feature_path(spec, image_id)
    if not path.exists():
        raise DataError(f"missing feature file {path}")
    data = formats.decode_features(path.read_bytes(), path)
    if image_shape is None:
        return FeatureMap(data, 1, None)
    try:
        stride = infer_stride(data.shape[1:], image_shape)
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return FeatureMap(data, stride, tuple(image_shape))


def downsample_mask(mask, stride: int) -> np.ndarray:
    """Average-pool a mask (or a batch of masks) by ``stride``; trailing partial cells are dropped."""
    if stride <= 0:
        raise DataError(f"stride must be positive, got {stride}")
    mask = np.asarray(mask, dtype=np.float64)
    if stride == 1:
        return mask
    h, w = mask.shape[-2] // stride, mask.shape[-1] // stride
    m = mask[..., : h * stride, : w * stride]
    return m.reshape(*m.shape[:-2], h, stride, w, stride).mean(axis=(-3, -1))


def downsample_mask_adjoint(g: np.ndarray, stride: int, shape: tuple[int, int]) -> np.ndarray:
    if stride == 1:
        return g
    out = np.zeros(g.shape[:-2] + tuple(shape))
    h, w = g.shape[-2], g.shape[-1]
    up = np.repeat(np.repeat(g, stride, axis=-2), stride, axis=-1) / (stride * stride)
    out[..., : h * stride, : w * stride] = up
    return out
