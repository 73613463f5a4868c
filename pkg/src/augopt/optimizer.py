"""Distribution-matching search for augmentation parameters.

The per-anatomy loss is ``|mu_data + tau - mu_aug|``; a batch loss averages it
over a few sampled anatomies. The search starts from the best vector on a
coarse grid, then moves along fixed per-bundle directions with Adam:
``A = clamp(A0 + sum_k beta_k * Gamma|bundle_k)``.
"""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .augment import (MAX_RETRIES, MIN_OVERLAP, N_PARAMS, OPS, AugmentationParams, augment_batch,
                      batch_objective_gradient, m_index, p_index, param_bounds, param_names)
from .encoder import EncoderSpec, ReferenceEncoder
from .errors import DataError, DegenerateAnatomyError, NumericalError
from .rng import TAG_BATCH, TAG_COARSE, TAG_EPOCH, TAG_PROBE, RngKey
from .similarity import PrototypeObjective, _encoder, anchor_prototype

log = logging.getLogger(__name__)

# magnitudes scaled by the coarse-grid strengths
REFERENCE_MAGNITUDES = {"gamma": 0.5, "rotate": 0.5, "translate_x": 0.1, "translate_y": 0.1,
                        "shear": 0.3, "scale": 0.3}
DEFAULT_STRENGTHS = (0.0, 0.125, 0.25, 0.375, 0.5, 0.75, 1.0, 1.5, 2.0)


@dataclass(frozen=True)
class OptimizerConfig:
    tau: float = 0.03
    learning_rate: float = 0.0005
    max_epochs: int = 400
    batch_anatomies: int = 4
    B: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mode: str = "boundary"
    tolerance: float = 0.005
    patience: int = 20
    optimize_gates: bool = False
    resample_each_epoch: bool = True
    coarse_sample: int = 8
    probe_step: float = 0.02
    min_overlap: float = MIN_OVERLAP
    max_retries: int = MAX_RETRIES

    def __post_init__(self):
        if self.tau < 0:
            raise DataError("tau must be >= 0")
        if self.learning_rate < 0:
            raise DataError("learning_rate must be >= 0")
        if self.B < 1 or self.batch_anatomies < 1 or self.coarse_sample < 1:
            raise DataError("B, batch_anatomies, coarse_sample: each must be >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise DataError("max_epochs must be >= 0 and patience >= 1")
        if self.mode not in ("interior", "boundary"):
            raise DataError(f"mode must be 'interior' or 'boundary', got {self.mode!r}")
        if not 0 < self.probe_step < 1:
            raise DataError("probe_step must lie in (0, 1)")


def loss(mu_data: float, mu_aug: float, tau: float) -> float:
    """Absolute gap between ``mu_data + tau`` and ``mu_aug``."""
    for name, v in (("mu_data", mu_data), ("mu_aug", mu_aug)):
        if not -1.0 <= v <= 1.0:
            raise DataError(f"{name}={v} is not a similarity")
    return abs(mu_data + tau - mu_aug)


@dataclass
class Anatomy:
    """A pseudo-anatomy with its cached intra-class mean."""

    image_id: str
    superpixel_id: int
    image: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    mu_data: float
    _anchor: np.ndarray | None = field(default=None, repr=False, compare=False)

    def anchor(self, encoder: ReferenceEncoder) -> np.ndarray:
        if self._anchor is None:
            self._anchor = anchor_prototype(encoder, self.image, self.mask)
        return self._anchor


def default_bundles() -> dict[str, tuple[int, ...]]:
    geo = tuple(i for op in OPS[1:] for i in (p_index(op), m_index(op)))
    return {"geometric": geo, "intensity": (p_index("gamma"), m_index("gamma"))}


def single_bundle() -> dict[str, tuple[int, ...]]:
    return {"all": tuple(range(N_PARAMS))}


@dataclass(frozen=True)
class BundleSpec:
    a0: np.ndarray
    gamma: np.ndarray
    bundles: dict[str, tuple[int, ...]] = field(default_factory=default_bundles)
    beta: np.ndarray | None = None

    def __post_init__(self):
        a0 = np.asarray(self.a0, dtype=np.float64).copy()
        gamma = np.asarray(self.gamma, dtype=np.float64).copy()
        if a0.shape != (N_PARAMS,) or gamma.shape != (N_PARAMS,):
            raise DataError(f"A0 and Gamma need {N_PARAMS} entries")
        if np.any(gamma < 0) or not np.all(np.isfinite(gamma)):
            raise DataError("Gamma entries must be finite and >= 0")
        AugmentationParams(a0)
        covered = sorted(i for idx in self.bundles.values() for i in idx)
        if covered != list(range(N_PARAMS)):
            raise DataError("bundles must partition the parameter indices exactly")
        beta = np.zeros(len(self.bundles)) if self.beta is None else np.asarray(self.beta, dtype=np.float64).copy()
        if beta.shape != (len(self.bundles),):
            raise DataError("one beta per bundle")
        object.__setattr__(self, "a0", a0)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "bundles", {k: tuple(v) for k, v in self.bundles.items()})

    @property
    def names(self) -> list[str]:
        return list(self.bundles)

    def directions(self) -> np.ndarray:
        """(k, l) matrix; row k is Gamma restricted to bundle k."""
        d = np.zeros((len(self.bundles), N_PARAMS))
        for k, idx in enumerate(self.bundles.values()):
            d[k, list(idx)] = self.gamma[list(idx)]
        return d

    def realize(self, beta=None) -> tuple[AugmentationParams, np.ndarray]:
        beta = self.beta if beta is None else np.asarray(beta, dtype=np.float64)
        return AugmentationParams.clamped(self.a0 + beta @ self.directions())

    def with_beta(self, beta) -> "BundleSpec":
        return BundleSpec(self.a0, self.gamma, self.bundles, beta)


def _mu_aug(anatomy: Anatomy, params: AugmentationParams, enc: ReferenceEncoder, cfg: OptimizerConfig,
            key: RngKey) -> float:
    batch = augment_batch(anatomy.image, anatomy.mask, params, cfg.B, cfg.mode, key, cfg.min_overlap,
                          cfg.max_retries)
    if not batch.draws:
        raise DegenerateAnatomyError(f"anatomy ({anatomy.image_id}, {anatomy.superpixel_id}): all draws degenerate")
    values = PrototypeObjective(enc, anatomy.anchor(enc))(batch.images, batch.masks)[0]
    return float(np.mean(values))


def coarse_grid(strengths=DEFAULT_STRENGTHS, reference: dict | None = None) -> list[AugmentationParams]:
    reference = reference or REFERENCE_MAGNITUDES
    lo, hi = param_bounds()
    out = []
    for s in strengths:
        p = AugmentationParams.build(1.0, {op: s * m for op, m in reference.items()}).vector
        out.append(AugmentationParams(np.clip(p, lo, hi)))
    return out


def _coarse_sample(anatomies: list[Anatomy], cfg: OptimizerConfig) -> list[int]:
    n = min(cfg.coarse_sample, len(anatomies))
    rng = RngKey(cfg.seed, (TAG_COARSE,)).generator()
    return sorted(rng.choice(len(anatomies), size=n, replace=False).tolist())


def coarse_init(anatomies: list[Anatomy], encoder=EncoderSpec(), grid: list[AugmentationParams] | None = None,
                cfg: OptimizerConfig = OptimizerConfig(), bundles: dict | None = None) -> BundleSpec:
    """Grid search for A0 (gates at p = 1), then Gamma from sensitivity probes."""
    if not anatomies:
        raise DataError("no anatomies to search over")
    grid = coarse_grid() if grid is None else grid
    if not grid:
        raise DataError("coarse grid is empty")
    enc = _encoder(encoder)
    sample = [anatomies[i] for i in _coarse_sample(anatomies, cfg)]
    keys = [RngKey(cfg.seed, (TAG_COARSE, i)) for i in range(len(sample))]

    def batch_mu(params):
        return np.array([_mu_aug(a, params, enc, cfg, k) for a, k in zip(sample, keys)])

    mu_data = np.array([a.mu_data for a in sample])
    losses = []
    for cand in grid:
        cand = cand.with_gates(1.0)
        losses.append(float(np.mean(np.abs(mu_data + cfg.tau - batch_mu(cand)))))
    best = int(np.argmin(losses))
    a0 = grid[best].with_gates(1.0).vector
    log.info("coarse init: candidate %d of %d, batch loss %.4f", best, len(grid), losses[best])
    spec = BundleSpec(a0, np.zeros(N_PARAMS), bundles or default_bundles())
    return spec_with_probes(spec, sample, enc, cfg)


def spec_with_probes(spec: BundleSpec, sample: list[Anatomy], enc: ReferenceEncoder,
                     cfg: OptimizerConfig) -> BundleSpec:
    """Set Gamma to |d mu_aug / d A_i| by symmetric differences, scaled to unit max per bundle."""
    lo, hi = param_bounds()
    keys = [RngKey(cfg.seed, (TAG_PROBE, i)) for i in range(len(sample))]
    probed = [m_index(op) for op in OPS]
    if cfg.optimize_gates:
        probed += [p_index(op) for op in OPS]
    sens = np.zeros(N_PARAMS)
    for i in probed:
        up, down = spec.a0.copy(), spec.a0.copy()
        up[i] = min(hi[i], up[i] + cfg.probe_step)
        down[i] = max(lo[i], down[i] - cfg.probe_step)
        mu = []
        for vec in (up, down):
            params = AugmentationParams(vec)
            mu.append(np.mean([_mu_aug(a, params, enc, cfg, k) for a, k in zip(sample, keys)]))
        sens[i] = abs(mu[0] - mu[1]) / (up[i] - down[i])
    gamma = np.zeros(N_PARAMS)
    for idx in spec.bundles.values():
        idx = list(idx)
        top = sens[idx].max()
        if top >= 1e-12:
            gamma[idx] = sens[idx] / top
    return BundleSpec(spec.a0, gamma, spec.bundles, spec.beta)


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrajectoryRecord:
    bundle_names: list[str]
    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    mu_data: list[float] = field(default_factory=list)
    mu_aug: list[float] = field(default_factory=list)
    betas: list[np.ndarray] = field(default_factory=list)
    params: list[np.ndarray] = field(default_factory=list)

    def append(self, epoch, batch_loss, mu_data, mu_aug, beta, params) -> None:
        if self.epochs and epoch <= self.epochs[-1]:
            raise DataError("trajectory epochs must increase")
        self.epochs.append(int(epoch))
        self.losses.append(float(batch_loss))
        self.mu_data.append(float(mu_data))
        self.mu_aug.append(float(mu_aug))
        self.betas.append(np.array(beta, dtype=np.float64))
        self.params.append(np.array(params, dtype=np.float64))

    def __len__(self):
        return len(self.epochs)

    def header(self) -> list[str]:
        return (["epoch", "loss", "mu_data", "mu_aug"] + [f"beta_{n}" for n in self.bundle_names]
                + param_names())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        for i, epoch in enumerate(self.epochs):
            nums = [self.losses[i], self.mu_data[i], self.mu_aug[i], *self.betas[i], *self.params[i]]
            writer.writerow([epoch] + [repr(float(x)) for x in nums])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrajectoryRecord":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][:4] != ["epoch", "loss", "mu_data", "mu_aug"]:
            raise DataError("not a trajectory CSV")
        head = rows[0]
        names = [h[len("beta_"):] for h in head if h.startswith("beta_")]
        k = len(names)
        rec = cls(names)
        for row in rows[1:]:
            if len(row) != len(head):
                raise DataError(f"trajectory row has {len(row)} fields, expected {len(head)}")
            nums = [float(x) for x in row[1:]]
            rec.append(int(row[0]), nums[0], nums[1], nums[2], nums[3:3 + k], nums[3 + k:])
        return rec


@dataclass
class _AnatomyResult:
    loss: float
    mu_aug: float
    grad: np.ndarray


def _evaluate(anatomy: Anatomy, params: AugmentationParams, enc: ReferenceEncoder, cfg: OptimizerConfig,
              key: RngKey) -> _AnatomyResult:
    target = anatomy.mu_data + cfg.tau

    def outer(mu):
        gap = target - mu
        return abs(gap), -float(np.sign(gap))

    value, grad, _, values = batch_objective_gradient(
        anatomy.image, anatomy.mask, params, cfg.B, PrototypeObjective(enc, anatomy.anchor(enc)),
        cfg.mode, key, outer, cfg.min_overlap, cfg.max_retries)
    return _AnatomyResult(value, float(np.mean(values)), grad.vector)


def _epoch_batch(n: int, cfg: OptimizerConfig, epoch: int) -> list[int]:
    size = min(cfg.batch_anatomies, n)
    tag = epoch if cfg.resample_each_epoch else 0
    rng = RngKey(cfg.seed, (TAG_EPOCH, tag)).generator()
    return rng.choice(n, size=size, replace=False).tolist()


def optimize(anatomies: list[Anatomy], encoder=EncoderSpec(), cfg: OptimizerConfig = OptimizerConfig(),
             bundle: BundleSpec | None = None, workers: int = 1, progress=None) \
        -> tuple[AugmentationParams, TrajectoryRecord, BundleSpec]:
    """Adam on the bundle multipliers.

    Returns ``(params, trajectory, final_bundle)``.
    """
    if not anatomies:
        raise DataError("no anatomies to optimize over")
    enc = _encoder(encoder)
    bundle = bundle if bundle is not None else coarse_init(anatomies, enc, cfg=cfg)
    if not cfg.optimize_gates:
        frozen = bundle.gamma.copy()
        frozen[0::2] = 0.0
        bundle = BundleSpec(bundle.a0, frozen, bundle.bundles, bundle.beta)
    directions = bundle.directions()
    beta = bundle.beta.copy()
    adam = Adam(beta.size, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    traj = TrajectoryRecord(bundle.names)
    calm = 0
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for epoch in range(cfg.max_epochs):
            params, active = bundle.realize(beta)
            picked = _epoch_batch(len(anatomies), cfg, epoch)
            tag = epoch if cfg.resample_each_epoch else 0
            keys = [RngKey(cfg.seed, (TAG_BATCH, tag, i)) for i in picked]
            futures = [pool.submit(_evaluate, anatomies[i], params, enc, cfg, k) for i, k in zip(picked, keys)]
            results, used = [], []
            for i, fut in zip(picked, futures):
                try:
                    results.append(fut.result())
                    used.append(i)
                except DegenerateAnatomyError as exc:
                    log.warning("epoch %d: %s", epoch, exc)
            if not results:
                raise NumericalError(f"epoch {epoch}: every sampled anatomy was degenerate")
            batch_loss = float(np.mean([r.loss for r in results]))
            grad_a = np.mean([r.grad for r in results], axis=0)
            if not np.isfinite(batch_loss) or not np.all(np.isfinite(grad_a)):
                raise NumericalError(f"epoch {epoch}: non-finite loss or gradient")
            grad_beta = directions @ np.where(active, 0.0, grad_a)
            traj.append(epoch, batch_loss, np.mean([anatomies[i].mu_data for i in used]),
                        np.mean([r.mu_aug for r in results]), beta, params.vector)
            if progress is not None:
                progress(epoch, batch_loss)
            beta = adam.step(beta, grad_beta)
            calm = calm + 1 if batch_loss < cfg.tolerance else 0
            if calm >= cfg.patience:
                log.info("converged at epoch %d", epoch)
                break
    final = bundle.with_beta(beta)
    return final.realize()[0], traj, final
