"""Trajectory figures for the ``report`` subcommand."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .optimizer import TrajectoryRecord  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.7),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "savefig.dpi": 120,
}


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if y.size < window or window < 2:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def loss_figure(traj: TrajectoryRecord, path, tolerance: float | None = None, window: int = 20) -> Path:
    epochs = np.asarray(traj.epochs)
    losses = np.asarray(traj.losses)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, losses, lw=0.7, alpha=0.5, label="batch loss")
        smooth = _smooth(losses, window)
        if smooth is not losses:
            ax.plot(epochs[window - 1:], smooth, lw=1.5, label=f"{window}-epoch mean")
        if tolerance is not None:
            ax.axhline(tolerance, color="k", ls="--", lw=0.8, label="tolerance")
        ax.set_xlabel("epoch")
        ax.set_ylabel(r"$|\mu_{data} + \tau - \mu_{aug}|$")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def similarity_figure(traj: TrajectoryRecord, path, tau: float | None = None) -> Path:
    epochs = np.asarray(traj.epochs)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, traj.mu_data, lw=0.8, label=r"$\mu_{data}$")
        if tau is not None:
            ax.plot(epochs, np.asarray(traj.mu_data) + tau, lw=0.8, ls=":", label=r"$\mu_{data} + \tau$")
        ax.plot(epochs, traj.mu_aug, lw=0.8, label=r"$\mu_{aug}$")
        ax.set_xlabel("epoch")
        ax.set_ylabel("batch mean similarity")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def beta_figure(traj: TrajectoryRecord, path) -> Path:
    epochs = np.asarray(traj.epochs)
    betas = np.asarray(traj.betas).reshape(len(epochs), len(traj.bundle_names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, name in enumerate(traj.bundle_names):
            ax.plot(epochs, betas[:, k], label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel(r"$\beta$")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def report_figures(traj: TrajectoryRecord, out_dir, tau: float | None = None,
                   tolerance: float | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [
        loss_figure(traj, out_dir / "loss.png", tolerance),
        similarity_figure(traj, out_dir / "similarity.png", tau),
        beta_figure(traj, out_dir / "beta.png"),
    ]
