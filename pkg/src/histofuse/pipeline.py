"""Stage functions gluing manifests to the preprocessing and feature code.

Each function does one pipeline stage on a whole manifest. They are kept
separate (rather than one monolithic run function) so the CLI can cache
and log them individually.
"""

from __future__ import annotations

import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from . import backbones, datasets, preprocess


class StageError(Exception):
    """A pipeline stage failed; carries the stage name for reporting."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


def prepare_image(
    source: str | Path | preprocess.ImageTensor,
    size: tuple[int, int] = preprocess.DEFAULT_SIZE,
) -> preprocess.ImageTensor:
    """Standard backbone input: load if needed, bicubic resize, then
    whole-tensor min-max to [0, 1]. Resize happens before scaling so the
    scale always reflects the resized tile."""
    img = source if isinstance(source, preprocess.ImageTensor) else preprocess.load_image(source)
    img = preprocess.resize_bicubic(img, size)
    return preprocess.minmax_normalize(img)


def fit_reference(
    source: str | Path | preprocess.ImageTensor,
    params: preprocess.MacenkoParams | None = None,
) -> preprocess.StainModel:
    img = source if isinstance(source, preprocess.ImageTensor) else preprocess.load_image(source)
    return preprocess.fit_stain_model(img, params)


def normalize_images(
    manifest: datasets.DatasetManifest,
    reference: preprocess.StainModel,
    out_dir: str | Path,
    params: preprocess.MacenkoParams | None = None,
    strict: bool = False,
) -> tuple[datasets.DatasetManifest, int]:
    """Stain-normalize every image in the manifest into out_dir.

    Images the estimator rejects (too little tissue, degenerate stains)
    are copied through unchanged and counted, so one blank tile cannot
    kill a batch; strict=True turns any such fallback into a failure.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flagged = 0
    new_records = []
    for i, record in enumerate(manifest.records):
        img = preprocess.load_image(record.image_path)
        try:
            rendered = preprocess.stain_normalize(img, reference, params)
        except preprocess.StainError as exc:
            if strict:
                raise
            warnings.warn(f"pass-through for {record.image_path}: {exc}")
            flagged += 1
            rendered = img
        dest = out / f"{i:05d}-{Path(record.image_path).stem}.png"
        preprocess.save_image(rendered, dest)
        new_records.append(datasets.SampleRecord(
            image_path=str(dest),
            dataset_id=record.dataset_id,
            raw_class=record.raw_class,
            binary_label=record.binary_label,
            patient_id=record.patient_id,
            magnification=record.magnification,
            split=record.split,
        ))
    return datasets.DatasetManifest(tuple(new_records), seed=manifest.seed), flagged


def split_records(
    manifest: datasets.DatasetManifest, split: str
) -> tuple[list[datasets.SampleRecord], list[int]]:
    """Records of one split plus their global manifest indices. The index
    is the sample_ref used everywhere downstream, so features from
    different backbones line up by construction."""
    records, refs = [], []
    for i, r in enumerate(manifest.records):
        if r.split == split:
            records.append(r)
            refs.append(i)
    return records, refs


def extract_split(
    backbone,
    manifest: datasets.DatasetManifest,
    split: str,
    tap: str = "pooled",
) -> tuple[list[backbones.FeatureVector], np.ndarray]:
    """Features and labels for one split, in manifest order."""
    records, refs = split_records(manifest, split)
    if not records:
        raise ValueError(f"manifest has no {split!r} records")
    images = [prepare_image(r.image_path) for r in records]
    features = backbone.extract(images, tap=tap, sample_refs=refs)
    labels = np.array([int(r.binary_label) for r in records], dtype=np.int64)
    return features, labels


def load_backbones(feature_cfg) -> dict[str, object]:
    """Instantiate every configured backbone once, keyed by id."""
    out = {}
    for backbone_id in feature_cfg.backbone_ids:
        out[backbone_id] = backbones.load_backbone(
            backbone_id, weights=feature_cfg.weights, weights_path=feature_cfg.weights_path
        )
    return out
