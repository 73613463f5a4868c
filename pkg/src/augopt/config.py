"""Run configuration: one flat JSON object with dotted keys.

Keys are ``<section>.<field>`` for the sections ``segmentation``, ``encoder``,
``optimizer`` and ``run``. Precedence, lowest first: built-in defaults, the
config file, command-line flags.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderSpec
from .errors import DataError
from .optimizer import OptimizerConfig
from .superpixel import SegmentationConfig


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    workers: int = 1
    image_dir: str | None = None
    labels_dir: str | None = None
    sdata_dir: str | None = None
    out_dir: str | None = None
    initial_params: str | None = None
    grid_strengths: tuple[float, ...] = (0.0, 0.125, 0.25, 0.375, 0.5, 0.75, 1.0, 1.5, 2.0)
    bundles: str = "default"

    def __post_init__(self):
        if self.workers < 1:
            raise DataError("run.workers must be >= 1")
        if self.bundles not in ("default", "single"):
            raise DataError("run.bundles must be 'default' or 'single'")
        object.__setattr__(self, "grid_strengths", tuple(float(s) for s in self.grid_strengths))


SECTIONS = {
    "segmentation": SegmentationConfig,
    "encoder": EncoderSpec,
    "optimizer": OptimizerConfig,
    "run": RunSettings,
}


@dataclass(frozen=True)
class RunConfig:
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    run: RunSettings = field(default_factory=RunSettings)

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        grouped: dict[str, dict] = {name: {} for name in SECTIONS}
        for key, value in flat.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise DataError(f"unknown config key {key!r}")
            known = {f.name for f in dataclasses.fields(SECTIONS[section])}
            if name not in known:
                raise DataError(f"unknown config key {key!r}")
            grouped[section][name] = value
        try:
            return cls(**{s: SECTIONS[s](**kw) for s, kw in grouped.items()})
        except TypeError as exc:
            raise DataError(f"bad config value: {exc}") from None

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict | None = None) -> "RunConfig":
        flat = {}
        if path is not None:
            try:
                flat = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise DataError(f"cannot read config {path}: {exc}") from None
            if not isinstance(flat, dict):
                raise DataError(f"config {path} must hold a JSON object")
        flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_flat(flat)

    def to_flat(self) -> dict:
        out = {}
        for section in SECTIONS:
            for key, value in dataclasses.asdict(getattr(self, section)).items():
                out[f"{section}.{key}"] = list(value) if isinstance(value, tuple) else value
        return out
