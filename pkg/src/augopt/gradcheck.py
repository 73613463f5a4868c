"""Finite-difference and estimator-unbiasedness checks for the augmentation gradients."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .augment import OPS, AugmentationParams, augment_batch, batch_objective_gradient, m_index, \
    score_function_gradient
from .imagecore import sample_coords
from .rng import RngKey
from .synthetic import blob_mask, smooth_random_image

# magnitude ranges sampled for each operator; kept clear of the gamma/scale floor
CHECK_RANGES = {
    "gamma": (0.2, 0.6),
    "rotate": (0.1, 0.6),
    "translate_x": (0.02, 0.15),
    "translate_y": (0.02, 0.15),
    "shear": (0.05, 0.4),
    "scale": (0.05, 0.4),
}
LATTICE_MARGIN = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    threshold: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.error < self.threshold)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: error {self.error:.3e} (threshold {self.threshold:.1e}) {self.detail}".rstrip()


class SmoothObjective:
    """Per-draw ``mean(W * image**2) + mean(V * mask)`` with fixed random weights.

    Weights are per draw, shape (B, H, W), so pixels can be excluded draw by draw.
    """

    def __init__(self, rng: np.random.Generator, shape: tuple[int, ...]):
        self.W = rng.random(shape)
        self.V = rng.random(shape)

    def exclude(self, where: np.ndarray) -> None:
        self.W = np.where(where, 0.0, self.W)
        self.V = np.where(where, 0.0, self.V)

    def __call__(self, images, masks, need_grad: bool = False):
        size = images[0].size
        values = (self.W * images**2).sum(axis=(1, 2)) / size + (self.V * masks).sum(axis=(1, 2)) / size
        if not need_grad:
            return values, None, None
        return values, 2.0 * self.W * images / size, self.V / size


def near_lattice(op: str, image, mask, m: float, key: RngKey, h: float, B: int,
                 mode: str = "interior") -> np.ndarray:
    """Output pixels whose sample coordinate passes within LATTICE_MARGIN of a lattice line over [m-h, m+h]."""
    params = AugmentationParams.build({op: 1.0}, {op: m})
    hh, ww = image.shape
    coords = []
    for mm in (m - h, m + h):
        batch = augment_batch(image, mask, params.with_values(**{f"{op}_m": mm}), B, mode, key)
        coords.append(sample_coords(batch.matrices, hh, ww))
    out = np.zeros((B, hh, ww), dtype=bool)
    for axis in range(2):
        a, b = coords[0][axis], coords[1][axis]
        lo, hi = np.minimum(a, b) - LATTICE_MARGIN, np.maximum(a, b) + LATTICE_MARGIN
        # coordinates the step leaves untouched cannot cross a kink
        out |= (a != b) & (np.floor(lo) != np.floor(hi))
    return out


def pathwise_case(op: str, image, mask, m: float, key: RngKey, objective, h: float = 1e-4, B: int = 4,
                  mode: str = "interior") -> tuple[float, float]:
    """Analytic and central-difference d(objective)/d(m_op) with only ``op`` active (p = 1)."""
    params = AugmentationParams.build({op: 1.0}, {op: m})
    _, grad, _, _ = batch_objective_gradient(image, mask, params, B, objective, mode, key)
    analytic = grad.pathwise[m_index(op)]

    def value(mm):
        batch = augment_batch(image, mask, params.with_values(**{f"{op}_m": mm}), B, mode, key)
        return float(np.mean(objective(batch.images, batch.masks)[0]))

    numeric = (value(m + h) - value(m - h)) / (2 * h)
    return analytic, numeric


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def pathwise_suite(ops=OPS, n_images: int = 20, size: int = 16, h: float = 1e-4, threshold: float = 1e-3,
                   seed: int = 0, B: int = 4) -> list[CheckResult]:
    """Max relative error per operator over ``n_images`` random smooth images.

    Bilinear sampling has kinks where a sample coordinate crosses a pixel
    lattice line; output pixels that come that close over the difference
    step get zero objective weight.
    """
    results = []
    for op in ops:
        rng = RngKey(seed, (OPS.index(op),)).generator()
        errors, excluded = [], 0
        for i in range(n_images):
            image = smooth_random_image(rng, size)
            centre = (size / 2 + rng.normal(0, 1), size / 2 + rng.normal(0, 1))
            mask = blob_mask(size, centre, size / 4, 1.5)
            objective = SmoothObjective(rng, (B, size, size))
            m = float(rng.uniform(*CHECK_RANGES[op]))
            key = RngKey(seed, (OPS.index(op), i))
            if op != "gamma":
                near = near_lattice(op, image, mask, m, key, h, B)
                objective.exclude(near)
                excluded += int(near.sum())
            analytic, numeric = pathwise_case(op, image, mask, m, key, objective, h, B)
            errors.append(relative_error(analytic, numeric))
        detail = f"({n_images} images, {excluded} of {n_images * B * size * size} pixels near lattice lines)"
        results.append(CheckResult(f"pathwise {op}", max(errors), threshold, detail))
    return results


def toy_objective(gates: np.ndarray) -> np.ndarray:
    """Bounded 2-gate objective with an interaction term."""
    g1, g2 = gates[..., 0].astype(float), gates[..., 1].astype(float)
    return 0.3 + 0.5 * g1 - 0.2 * g2 + 0.4 * g1 * g2


def exact_gate_derivative(objective, probs) -> np.ndarray:
    """d E[objective] / dp by enumerating every gate configuration."""
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.size
    grad = np.zeros(k)
    for config in itertools.product([False, True], repeat=k):
        g = np.array(config)
        value = float(objective(g[None])[0])
        for j in range(k):
            others = np.prod([probs[i] if g[i] else 1 - probs[i] for i in range(k) if i != j])
            grad[j] += value * others * (1.0 if g[j] else -1.0)
    return grad


def score_case(objective, probs, samples: int = 100_000, B: int = 4, seed: int = 0):
    """Mean, standard error and exact value of the score-function estimate over ``samples`` batches."""
    probs = np.asarray(probs, dtype=np.float64)
    rng = RngKey(seed, (len(OPS) + 1,)).generator()
    gates = rng.random((samples, B, probs.size)) < probs
    est = score_function_gradient(objective(gates), gates, probs)
    mean = est.mean(axis=0)
    se = est.std(axis=0, ddof=1) / np.sqrt(samples)
    return mean, se, exact_gate_derivative(objective, probs)


def score_suite(samples: int = 100_000, seed: int = 0, z: float = 3.0) -> list[CheckResult]:
    """Each check reports |mean - exact| in standard errors; passes below ``z``."""
    cases = [
        ("score 2-gate toy", toy_objective, [0.3, 0.7]),
        ("score constant objective", lambda g: np.full(g.shape[:-1], 0.42), [0.4, 0.6]),
        ("score single gate", lambda g: g[..., 0].astype(float), [0.5]),
    ]
    results = []
    for name, fn, probs in cases:
        mean, se, exact = score_case(fn, probs, samples, seed=seed)
        gap = np.abs(mean - exact)
        # a zero standard error only passes with an exact match
        zs = np.where(se > 0, gap / np.where(se > 0, se, 1.0), np.where(gap > 0, np.inf, 0.0))
        detail = f"(mean {np.round(mean, 4).tolist()}, exact {np.round(exact, 4).tolist()})"
        results.append(CheckResult(name, float(zs.max()), z, detail))
    return results
