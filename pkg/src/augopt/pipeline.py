"""Corpus-level glue: segmentation, pseudo-anatomy pools and intra-class caches."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .encoder import EncoderSpec, FeatureMap, get_encoder, load_features
from .errors import DataError
from .optimizer import Anatomy
from .similarity import IntraClassRecord, intra_class_corpus
from .superpixel import PseudoAnatomy, SegmentationConfig, SuperpixelLabeling, filter_pseudo_anatomies, segment


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def segment_corpus(images: dict[str, np.ndarray], cfg: SegmentationConfig = SegmentationConfig(),
                   workers: int = 1) -> dict[str, SuperpixelLabeling]:
    ids = list(images)
    out = _map(lambda k: segment(images[k], cfg, k), ids, workers)
    return dict(zip(ids, out))


def pseudo_anatomy_pool(labelings: dict[str, SuperpixelLabeling], cfg: SegmentationConfig) -> list[PseudoAnatomy]:
    return [a for lab in labelings.values() for a in filter_pseudo_anatomies(lab, cfg)]


def feature_maps(images: dict[str, np.ndarray], spec: EncoderSpec = EncoderSpec(),
                 workers: int = 1) -> dict[str, FeatureMap]:
    ids = list(images)
    if spec.kind == "file":
        out = [load_features(k, spec, images[k].shape) for k in ids]
    else:
        enc = get_encoder(spec)
        out = _map(lambda k: enc.encode(images[k]), ids, workers)
    return dict(zip(ids, out))


def build_sdata(images: dict[str, np.ndarray], labelings: dict[str, SuperpixelLabeling],
                seg_cfg: SegmentationConfig = SegmentationConfig(), spec: EncoderSpec = EncoderSpec(),
                workers: int = 1) -> list[IntraClassRecord]:
    missing = set(images) - set(labelings)
    if missing:
        raise DataError(f"no labels for images {sorted(missing)}")
    fms = feature_maps(images, spec, workers)
    pool = pseudo_anatomy_pool(labelings, seg_cfg)
    by_image: dict[str, list[PseudoAnatomy]] = {}
    for a in pool:
        by_image.setdefault(a.image_id, []).append(a)
    parts = _map(lambda k: intra_class_corpus(fms, by_image.get(k, [])), list(images), workers)
    return [r for part in parts for r in part]


def anatomies_from_records(images: dict[str, np.ndarray], labelings: dict[str, SuperpixelLabeling],
                           records: list[IntraClassRecord]) -> list[Anatomy]:
    out = []
    for r in records:
        mask = labelings[r.image_id].mask(r.superpixel_id)
        out.append(Anatomy(r.image_id, r.superpixel_id, images[r.image_id], mask, r.distribution.mean))
    return out
