"""Differentiable stochastic augmentation: gamma, rotation, translation, shear, scale.

Each operator has a gate probability ``p`` (Bernoulli) and a magnitude bound
``m`` (the realized magnitude is uniform on the operator's interval, or one of
its endpoints in ``boundary`` mode). Gradients of a batch objective reach the
bounds pathwise through the realized magnitudes, and reach the gate
probabilities through a score-function estimator with a leave-one-out baseline.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateAnatomyError, NumericalError
from .imagecore import AffineMap, coordinate_sensitivities, warp_batch
from .rng import RngKey

OPS = ("gamma", "rotate", "translate_x", "translate_y", "shear", "scale")
GEOMETRIC_OPS = OPS[1:]
N_PARAMS = 2 * len(OPS)
FORMAT_VERSION = 1

# magnitude bound ranges; gamma and scale intervals are [1 - m, 1 + m] floored at FLOOR
M_RANGE = {
    "gamma": (0.0, 2.0),
    "rotate": (0.0, np.pi),
    "translate_x": (0.0, 0.5),
    "translate_y": (0.0, 0.5),
    "shear": (0.0, 1.0),
    "scale": (0.0, 2.0),
}
FLOOR = 0.05
IDENTITY_VALUE = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 1.0])
MULTIPLICATIVE = np.array([True, False, False, False, False, True])

MIN_OVERLAP = 0.1
MAX_RETRIES = 8
LOG_CLAMP = 1e-6


def p_index(op: str) -> int:
    return 2 * OPS.index(op)


def m_index(op: str) -> int:
    return 2 * OPS.index(op) + 1


def param_names() -> list[str]:
    return [f"{op}.{kind}" for op in OPS for kind in ("p", "m")]


def param_bounds() -> tuple[np.ndarray, np.ndarray]:
    lo = np.zeros(N_PARAMS)
    hi = np.ones(N_PARAMS)
    for i, op in enumerate(OPS):
        lo[2 * i + 1], hi[2 * i + 1] = M_RANGE[op]
    return lo, hi


@dataclass(frozen=True)
class AugmentationParams:
    """Flat vector ``[gamma.p, gamma.m, rotate.p, rotate.m, ...]`` of length 12."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64).reshape(-1)
        if v.shape != (N_PARAMS,):
            raise DataError(f"expected {N_PARAMS} parameters, got {v.size}")
        lo, hi = param_bounds()
        if not np.all(np.isfinite(v)) or np.any(v < lo) or np.any(v > hi):
            bad = [n for n, x, a, b in zip(param_names(), v, lo, hi) if not a <= x <= b]
            raise DataError(f"parameters out of range: {', '.join(bad)}")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @classmethod
    def build(cls, p: float | dict = 1.0, m: dict | None = None) -> "AugmentationParams":
        """Build from per-operator probabilities and bounds; unspecified bounds are 0."""
        m = m or {}
        probs = p if isinstance(p, dict) else {op: p for op in OPS}
        vec = np.zeros(N_PARAMS)
        for op in OPS:
            vec[p_index(op)] = probs.get(op, 0.0)
            vec[m_index(op)] = m.get(op, 0.0)
        return cls(vec)

    @classmethod
    def identity(cls) -> "AugmentationParams":
        return cls(np.zeros(N_PARAMS))

    @classmethod
    def clamped(cls, raw) -> tuple["AugmentationParams", np.ndarray]:
        """Clamp a raw vector into range; also returns the mask of actively clamped entries."""
        raw = np.asarray(raw, dtype=np.float64)
        lo, hi = param_bounds()
        active = (raw < lo) | (raw > hi)
        return cls(np.clip(raw, lo, hi)), active

    def p(self, op: str) -> float:
        return float(self.vector[p_index(op)])

    def m(self, op: str) -> float:
        return float(self.vector[m_index(op)])

    @property
    def probs(self) -> np.ndarray:
        return self.vector[0::2]

    @property
    def bounds(self) -> np.ndarray:
        return self.vector[1::2]

    def with_values(self, **values: float) -> "AugmentationParams":
        """Copy with entries replaced, keys like ``rotate_m`` or ``gamma_p``."""
        vec = self.vector.copy()
        for key, val in values.items():
            op, kind = key.rsplit("_", 1)
            vec[p_index(op) if kind == "p" else m_index(op)] = val
        return AugmentationParams(vec)

    def with_gates(self, p: float) -> "AugmentationParams":
        vec = self.vector.copy()
        vec[0::2] = p
        return AugmentationParams(vec)

    def to_dict(self) -> dict:
        out = {"format_version": FORMAT_VERSION}
        out.update({name: float(v) for name, v in zip(param_names(), self.vector)})
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentationParams":
        data = dict(data)
        version = data.pop("format_version", None)
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported parameter format_version {version!r}")
        names = param_names()
        unknown = set(data) - set(names)
        missing = set(names) - set(data)
        if unknown or missing:
            raise DataError(f"parameter file keys: unknown {sorted(unknown)}, missing {sorted(missing)}")
        return cls(np.array([float(data[n]) for n in names]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AugmentationParams":
        return cls.from_dict(json.loads(text))


def intervals(bounds: np.ndarray):
    """Per-operator (lo, hi, dlo/dm, dhi/dm) for magnitude bounds ``bounds`` (6,)."""
    bounds = np.asarray(bounds, dtype=np.float64)
    lo = np.where(MULTIPLICATIVE, np.maximum(1.0 - bounds, FLOOR), -bounds)
    hi = np.where(MULTIPLICATIVE, 1.0 + bounds, bounds)
    dlo = np.where(MULTIPLICATIVE & (1.0 - bounds <= FLOOR), 0.0, -1.0)
    dhi = np.ones_like(bounds)
    return lo, hi, dlo, dhi


@dataclass(frozen=True)
class AugmentationDraw:
    gates: np.ndarray
    values: np.ndarray
    gate_u: np.ndarray
    magnitude_u: np.ndarray
    mode: str
    dvalue_dm: np.ndarray = field(repr=False)
    key: RngKey | None = None

    @property
    def effective(self) -> np.ndarray:
        """Magnitudes actually applied; closed gates give the identity value."""
        return np.where(self.gates, self.values, IDENTITY_VALUE)

    @property
    def is_identity(self) -> bool:
        return not self.gates.any()

    def affine(self, height: int, width: int) -> AffineMap:
        _, angle, tx, ty, shear, scale = self.effective
        return AffineMap.from_params(height, width, angle=angle, tx=tx, ty=ty, shear=shear, scale=scale)


def realize_draw(params: AugmentationParams, gate_u, magnitude_u, mode: str = "boundary",
                 key: RngKey | None = None) -> AugmentationDraw:
    """Deterministic draw from stored uniform variates."""
    if mode not in ("interior", "boundary"):
        raise DataError(f"sampling mode must be 'interior' or 'boundary', got {mode!r}")
    gate_u = np.asarray(gate_u, dtype=np.float64)
    magnitude_u = np.asarray(magnitude_u, dtype=np.float64)
    lo, hi, dlo, dhi = intervals(params.bounds)
    gates = gate_u < params.probs
    if mode == "interior":
        values = lo + magnitude_u * (hi - lo)
        dvalue = dlo + magnitude_u * (dhi - dlo)
    else:
        upper = magnitude_u >= 0.5
        values = np.where(upper, hi, lo)
        dvalue = np.where(upper, dhi, dlo)
    return AugmentationDraw(gates, values, gate_u, magnitude_u, mode, dvalue, key)


def sample_draw(params: AugmentationParams, mode: str, rng: np.random.Generator,
                key: RngKey | None = None) -> AugmentationDraw:
    gate_u = rng.random(len(OPS))
    magnitude_u = rng.random(len(OPS))
    return realize_draw(params, gate_u, magnitude_u, mode, key)


class DegenerateAugmentation(Exception):
    """The warped mask kept less than ``min_overlap`` of its area; redraw."""


def apply(image, mask, draw: AugmentationDraw, min_overlap: float = MIN_OVERLAP):
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.shape != mask.shape:
        raise DataError(f"image {image.shape} and mask {mask.shape} differ in shape")
    out_img, out_mask = image, mask
    if draw.gates[0]:
        out_img = image ** draw.values[0]
    if draw.gates[1:].any():
        h, w = image.shape
        mats = np.broadcast_to(draw.affine(h, w).matrix, (2, 2, 3))
        warped = warp_batch(np.stack([out_img, mask]), mats)
        out_img, out_mask = warped[0], warped[1]
    if out_mask.sum() < min_overlap * mask.sum():
        raise DegenerateAugmentation(f"mask kept {out_mask.sum():.3g} of {mask.sum():.3g}")
    return out_img, out_mask


@dataclass
class AugmentedBatch:
    """Accepted draws and their augmented (image, mask) pairs."""

    draws: list[AugmentationDraw]
    images: np.ndarray
    masks: np.ndarray
    gamma_images: np.ndarray
    matrices: np.ndarray
    skipped: int


def augment_batch(image, mask, params: AugmentationParams, B: int, mode: str, key: RngKey,
                  min_overlap: float = MIN_OVERLAP, max_retries: int = MAX_RETRIES) -> AugmentedBatch:
    """Draw ``B`` augmentations, draw ``b`` from stream ``key.child(b)``.

    Degenerate draws are redrawn from the same stream up to ``max_retries``
    times, then skipped and counted.
    """
    if B < 1:
        raise DataError(f"B must be >= 1, got {B}")
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    h, w = image.shape
    area = mask.sum()
    gens = [key.child(b).generator() for b in range(B)]
    draws = [sample_draw(params, mode, g, key.child(b)) for b, g in enumerate(gens)]
    mats = np.stack([d.affine(h, w).matrix for d in draws])
    masks = warp_batch(np.broadcast_to(mask, (B, h, w)), mats)
    keep = np.ones(B, dtype=bool)
    skipped = 0
    for b in np.flatnonzero(masks.reshape(B, -1).sum(axis=1) < min_overlap * area).tolist():
        for _ in range(max_retries):
            draw = sample_draw(params, mode, gens[b], key.child(b))
            mat = draw.affine(h, w).matrix
            warped = warp_batch(mask[None], mat[None])[0]
            if warped.sum() >= min_overlap * area:
                draws[b], mats[b], masks[b] = draw, mat, warped
                break
        else:
            keep[b] = False
            skipped += 1
    draws = [d for d, k in zip(draws, keep) if k]
    mats, masks = mats[keep], masks[keep]
    gammas = np.array([d.effective[0] for d in draws])
    gamma_images = image[None] ** gammas[:, None, None] if draws else np.zeros((0, h, w))
    images = warp_batch(gamma_images, mats) if draws else gamma_images
    return AugmentedBatch(draws, images, masks, gamma_images, mats, skipped)


@dataclass(frozen=True)
class ParamGradient:
    """d(objective)/d(params) split into its pathwise and score-function parts."""

    pathwise: np.ndarray
    score: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return self.pathwise + self.score


def gate_scores(gates: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """d log Bernoulli(gate; p) / dp, elementwise."""
    gates = np.asarray(gates, dtype=bool)
    probs = np.broadcast_to(np.asarray(probs, dtype=np.float64), gates.shape)
    safe_p = np.where(probs > 0, probs, 1.0)
    safe_q = np.where(probs < 1, 1.0 - probs, 1.0)
    return np.where(gates, 1.0 / safe_p, -1.0 / safe_q)


def score_function_gradient(values, gates, probs) -> np.ndarray:
    """Estimate d E[value] / dp for each gate from one batch of draws.

    ``values`` is (..., n), ``gates`` (..., n, k); leading axes are independent
    batches. Uses a leave-one-out baseline, which keeps the estimator unbiased
    for any batch size.
    """
    values = np.asarray(values, dtype=np.float64)
    gates = np.asarray(gates, dtype=bool)
    n = values.shape[-1]
    if n == 0:
        return np.zeros(gates.shape[:-2] + gates.shape[-1:])
    if n > 1:
        baseline = (values.sum(axis=-1, keepdims=True) - values) / (n - 1)
    else:
        baseline = np.zeros_like(values)
    scores = gate_scores(gates, probs)
    return ((values - baseline)[..., None] * scores).sum(axis=-2) / n


def _identity_outer(mu: float):
    return mu, 1.0


def batch_objective_gradient(image, mask, params: AugmentationParams, B: int, objective,
                             mode: str = "boundary", key: RngKey = RngKey(0), outer=None,
                             min_overlap: float = MIN_OVERLAP, max_retries: int = MAX_RETRIES):
    """Objective value and its gradient with respect to ``params``.

    ``objective(images, masks, need_grad)`` maps a batch of augmented pairs to
    per-draw values (n,) and, when ``need_grad``, their sensitivities with
    respect to the augmented images and masks (or ``None`` for either). The
    batch objective is ``outer(mean(values))``; ``outer`` returns the value and
    its derivative and defaults to the identity.

    Returns ``(value, ParamGradient, batch, per_draw_values)``.
    """
    outer = outer or _identity_outer
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    batch = augment_batch(image, mask, params, B, mode, key, min_overlap, max_retries)
    n = len(batch.draws)
    if n == 0:
        raise DegenerateAnatomyError(f"all {B} draws were degenerate")
    values, d_img, d_mask = objective(batch.images, batch.masks, True)
    values = np.asarray(values, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NumericalError(f"objective is non-finite at draw {int(bad[0])}")
    mu = float(np.mean(values))
    value, d_outer = outer(mu)
    h, w = image.shape

    gates = np.array([d.gates for d in batch.draws])
    dvalue_dm = np.array([d.dvalue_dm for d in batch.draws])
    d_values = np.zeros((n, len(OPS)))  # d value_b / d realized magnitude
    if d_img is not None:
        d_img = np.asarray(d_img, dtype=np.float64)
        _, dx, dy = warp_batch(batch.gamma_images, batch.matrices, with_coord_grad=True)
        dmats = np.stack([d.affine(h, w).param_derivatives() for d in batch.draws])
        d_values[:, 1:] += coordinate_sensitivities(d_img, dx, dy, dmats)
        if gates[:, 0].any():
            log_img = np.log(np.maximum(image, LOG_CLAMP))
            tangent = warp_batch(batch.gamma_images * log_img[None], batch.matrices)
            d_values[:, 0] = np.einsum("nij,nij->n", d_img, tangent)
    if d_mask is not None and gates[:, 1:].any():
        d_mask = np.asarray(d_mask, dtype=np.float64)
        _, dx, dy = warp_batch(np.broadcast_to(mask, (n, h, w)), batch.matrices, with_coord_grad=True)
        dmats = np.stack([d.affine(h, w).param_derivatives() for d in batch.draws])
        d_values[:, 1:] += coordinate_sensitivities(d_mask, dx, dy, dmats)

    pathwise = np.zeros(N_PARAMS)
    pathwise[1::2] = d_outer * (gates * d_values * dvalue_dm).sum(axis=0) / n
    score = np.zeros(N_PARAMS)
    score[0::2] = d_outer * score_function_gradient(values, gates, params.probs)
    grad = ParamGradient(pathwise, score)
    if not np.all(np.isfinite(grad.vector)):
        raise NumericalError("non-finite parameter gradient")
    return value, grad, batch, values
