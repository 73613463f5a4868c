"""Grid types, affine geometry and differentiable bilinear resampling.

Images and masks are plain 2-D float64 numpy arrays with values in [0, 1].
Pixel centers sit at integer coordinates; transforms act about the image
center ``((W - 1) / 2, (H - 1) / 2)``. Samples falling outside the source
read as zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvalidTransformError

GEOMETRIC_PARAMS = ("angle", "tx", "ty", "shear", "scale")


def as_image(data, *, name: str = "image") -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] < 2:
        raise DataError(f"{name} must be a 2-D grid of at least 2x2, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError(f"{name} values must lie in [0, 1]")
    return arr


def as_mask(data, like: np.ndarray | None = None) -> np.ndarray:
    arr = as_image(data, name="mask")
    if like is not None and arr.shape != like.shape:
        raise DataError(f"mask shape {arr.shape} does not match image shape {like.shape}")
    return arr


def _translate(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])


def _linear(a: float, b: float, c: float, d: float) -> np.ndarray:
    return np.array([[a, b, 0.0], [c, d, 0.0], [0.0, 0.0, 1.0]])


def _inverse_factors(h: int, w: int, angle, tx, ty, shear, scale):
    """Inverse factors (sampling order) and their parameter derivatives, centered coords."""
    ca, sa = np.cos(angle), np.sin(angle)
    sec2 = 1.0 / np.cos(shear) ** 2
    factors = [
        _linear(1.0 / scale, 0.0, 0.0, 1.0 / scale),
        _linear(1.0, -np.tan(shear), 0.0, 1.0),
        _linear(ca, sa, -sa, ca),
        _translate(-tx * w, -ty * h),
    ]
    zero = np.zeros((3, 3))
    d_scale = zero.copy()
    d_scale[0, 0] = d_scale[1, 1] = -1.0 / scale**2
    d_shear = zero.copy()
    d_shear[0, 1] = -sec2
    d_angle = zero.copy()
    d_angle[:2, :2] = [[-sa, ca], [-ca, -sa]]
    d_tx = zero.copy()
    d_tx[0, 2] = -float(w)
    d_ty = zero.copy()
    d_ty[1, 2] = -float(h)
    # (factor index, derivative) for angle, tx, ty, shear, scale
    derivs = [(2, d_angle), (3, d_tx), (3, d_ty), (1, d_shear), (0, d_scale)]
    return factors, derivs


@dataclass(frozen=True)
class AffineMap:
    """2x3 matrix mapping output pixel coordinates to input coordinates.

    ``params`` records the geometric parameters the map was built from, or is
    ``None`` for maps produced by composition/inversion.
    """

    matrix: np.ndarray
    shape: tuple[int, int]
    params: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise InvalidTransformError(f"affine matrix must be 2x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidTransformError("affine matrix has non-finite entries")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls, height: int, width: int) -> "AffineMap":
        return cls.from_params(height, width)

    @classmethod
    def from_params(cls, height: int, width: int, angle: float = 0.0, tx: float = 0.0,
                    ty: float = 0.0, shear: float = 0.0, scale: float = 1.0) -> "AffineMap":
        """Content transform: scale, shear, rotate, translate (in that order) about the center.

        ``tx``/``ty`` are fractions of the image width/height; ``angle`` and
        ``shear`` are radians.
        """
        if not np.isfinite([angle, tx, ty, shear, scale]).all():
            raise InvalidTransformError("non-finite transform parameter")
        if scale <= 0.0:
            raise InvalidTransformError(f"scale must be positive, got {scale}")
        if abs(np.cos(shear)) < 1e-9:
            raise InvalidTransformError(f"shear {shear} is singular")
        factors, _ = _inverse_factors(height, width, angle, tx, ty, shear, scale)
        centered = factors[0] @ factors[1] @ factors[2] @ factors[3]
        cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
        full = _translate(cx, cy) @ centered @ _translate(-cx, -cy)
        params = dict(angle=angle, tx=tx, ty=ty, shear=shear, scale=scale)
        return cls(full[:2], (height, width), params)

    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    def compose(self, then: "AffineMap") -> "AffineMap":
        """Map equivalent to warping with ``self`` and afterwards with ``then``."""
        return AffineMap((self.homogeneous() @ then.homogeneous())[:2], self.shape)

    def inverse(self) -> "AffineMap":
        return AffineMap(np.linalg.inv(self.homogeneous())[:2], self.shape)

    def apply_points(self, xs, ys):
        m = self.matrix
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        return m[0, 0] * xs + m[0, 1] * ys + m[0, 2], m[1, 0] * xs + m[1, 1] * ys + m[1, 2]

    def param_derivatives(self) -> np.ndarray:
        """d(matrix)/d(angle, tx, ty, shear, scale) as a (5, 2, 3) array."""
        if self.params is None:
            raise InvalidTransformError("derivatives need a map built from parameters")
        h, w = self.shape
        factors, derivs = _inverse_factors(h, w, **self.params)
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        pre, post = _translate(cx, cy), _translate(-cx, -cy)
        out = np.empty((5, 2, 3))
        for k, (slot, d) in enumerate(derivs):
            chain = [d if i == slot else f for i, f in enumerate(factors)]
            out[k] = (pre @ chain[0] @ chain[1] @ chain[2] @ chain[3] @ post)[:2]
        return out


def _grid(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys


def sample_coords(matrices: np.ndarray, h: int, w: int):
    """Source coordinates for every output pixel; ``matrices`` is (n, 2, 3)."""
    xs, ys = _grid(h, w)
    m = matrices[:, :, :, None, None]
    sx = m[:, 0, 0] * xs + m[:, 0, 1] * ys + m[:, 0, 2]
    sy = m[:, 1, 0] * xs + m[:, 1, 1] * ys + m[:, 1, 2]
    return sx, sy


_PAD = 2


def _corners(src: np.ndarray, sx: np.ndarray, sy: np.ndarray):
    """Fractions and the four neighbour values, reading zero outside the source."""
    n, h, w = src.shape
    padded = np.zeros((n, h + 2 * _PAD, w + 2 * _PAD))
    padded[:, _PAD:-_PAD, _PAD:-_PAD] = src
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    # any corner clipped into the padding band reads zero, like the true out-of-range pixel
    xi = np.clip(x0, -_PAD, w).astype(np.int64) + _PAD
    yi = np.clip(y0, -_PAD, h).astype(np.int64) + _PAD
    pw = w + 2 * _PAD
    base = (np.arange(n) * (h + 2 * _PAD) * pw)[:, None, None] + yi * pw + xi
    flat = padded.ravel()
    return fx, fy, flat[base], flat[base + 1], flat[base + pw], flat[base + pw + 1]


def warp_batch(src: np.ndarray, matrices: np.ndarray, *, with_coord_grad: bool = False):
    """Bilinear warp of ``src`` (n, H, W) by per-item matrices (n, 2, 3).

    With ``with_coord_grad`` also returns d(out)/d(source x) and d(out)/d(source y).
    """
    src = np.asarray(src, dtype=np.float64)
    n, h, w = src.shape
    sx, sy = sample_coords(np.asarray(matrices, dtype=np.float64).reshape(n, 2, 3), h, w)
    fx, fy, v00, v01, v10, v11 = _corners(src, sx, sy)
    gx, gy = 1.0 - fx, 1.0 - fy
    out = gx * gy * v00 + fx * gy * v01 + gx * fy * v10 + fx * fy * v11
    if not with_coord_grad:
        return out
    dx = gy * (v01 - v00) + fy * (v11 - v10)
    dy = gx * (v10 - v00) + fx * (v11 - v01)
    return out, dx, dy


def bilinear_sample(src, amap: AffineMap) -> np.ndarray:
    """Resample an image or mask through ``amap`` with zero padding."""
    src = np.asarray(src, dtype=np.float64)
    if src.shape != tuple(amap.shape):
        raise DataError(f"map built for shape {amap.shape}, source is {src.shape}")
    return warp_batch(src[None], amap.matrix[None])[0]


def coordinate_sensitivities(upstream, dx, dy, dmat: np.ndarray) -> np.ndarray:
    """Contract per-pixel sensitivities with d(source coords)/d(parameter).

    ``upstream``, ``dx``, ``dy`` are (n, H, W); ``dmat`` is (n, k, 2, 3).
    Returns (n, k).
    """
    n, h, w = dx.shape
    xs, ys = _grid(h, w)
    ux = (upstream * dx).reshape(n, -1)
    uy = (upstream * dy).reshape(n, -1)
    basis = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])  # (3, HW)
    # sum_p ux[p] * (dM0 . [x, y, 1]) = dM0 . (basis @ ux)
    mx = ux @ basis.T  # (n, 3)
    my = uy @ basis.T
    return np.einsum("nkj,nj->nk", dmat[:, :, 0, :], mx) + np.einsum("nkj,nj->nk", dmat[:, :, 1, :], my)


def bilinear_sample_jacobian(src, amap: AffineMap, upstream) -> dict[str, float]:
    """d<upstream, bilinear_sample(src, amap)>/d(theta) for each geometric parameter."""
    src = np.asarray(src, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != src.shape:
        raise DataError("upstream sensitivities must match the source shape")
    _, dx, dy = warp_batch(src[None], amap.matrix[None], with_coord_grad=True)
    sens = coordinate_sensitivities(upstream[None], dx, dy, amap.param_derivatives()[None])[0]
    return dict(zip(GEOMETRIC_PARAMS, (float(v) for v in sens)))
