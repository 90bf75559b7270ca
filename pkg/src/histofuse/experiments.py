"""Evaluation: confusion counts, derived metrics, comparison reports, and
the end-to-end experiment driver.

Malignant is the positive class everywhere. Percentages are formatted
with half-up rounding to two decimals; the underlying fractions are kept
alongside so nothing downstream has to re-parse strings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines, fusion, pipeline
from .config import PipelineConfig, config_digest
from .datasets import DatasetManifest


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion table with malignant (label 1) as positive."""

    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    counts: ConfusionCounts
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: tuple[str, ...] = ()


def confusion(y_true: Sequence[int], y_pred: Sequence[int]) -> ConfusionCounts:
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError(f"label/prediction shapes differ: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise ValueError("empty evaluation set")
    for name, arr in (("labels", t), ("predictions", p)):
        if not np.all(np.isin(arr, (0, 1))):
            raise ValueError(f"{name} must be 0 or 1")
    return ConfusionCounts(
        tp=int(np.sum((t == 1) & (p == 1))),
        fp=int(np.sum((t == 0) & (p == 1))),
        tn=int(np.sum((t == 0) & (p == 0))),
        fn=int(np.sum((t == 1) & (p == 0))),
    )


def compute_metrics(counts: ConfusionCounts) -> MetricsReport:
    """Accuracy, precision, recall, F1 as fractions.

    A zero denominator yields 0.0 and tags the metric as degenerate
    instead of raising, so an all-one-class evaluation still reports.
    """
    if counts.total == 0:
        raise ValueError("cannot compute metrics for zero samples")
    degenerate: list[str] = []
    accuracy = (counts.tp + counts.tn) / counts.total
    if counts.tp + counts.fp == 0:
        precision = 0.0
        degenerate.append("precision")
    else:
        precision = counts.tp / (counts.tp + counts.fp)
    if counts.tp + counts.fn == 0:
        recall = 0.0
        degenerate.append("recall")
    else:
        recall = counts.tp / (counts.tp + counts.fn)
    if precision + recall == 0.0:
        f1 = 0.0
        degenerate.append("f1")
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return MetricsReport(counts, accuracy, precision, recall, f1, tuple(degenerate))


def format_pct(fraction: float) -> str:
    """Format a fraction as a percentage, two decimals, half rounded up."""
    pct = Decimal(repr(float(fraction))) * Decimal(100)
    return str(pct.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def metrics_to_dict(report: MetricsReport) -> dict:
    return {
        "tp": report.counts.tp,
        "fp": report.counts.fp,
        "tn": report.counts.tn,
        "fn": report.counts.fn,
        "accuracy": report.accuracy,
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "accuracy_pct": format_pct(report.accuracy),
        "precision_pct": format_pct(report.precision),
        "recall_pct": format_pct(report.recall),
        "f1_pct": format_pct(report.f1),
        "degenerate": list(report.degenerate),
    }


def save_metrics(report: MetricsReport, path: str | Path, extra: dict | None = None) -> None:
    payload = metrics_to_dict(report)
    if extra:
        overlap = set(extra) & set(payload)
        if overlap:
            raise ValueError(f"extra keys collide with metric keys: {sorted(overlap)}")
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class ReportRow:
    model_id: str
    dataset_id: str
    n_train: int
    n_test: int
    metrics: MetricsReport


_REPORT_COLUMNS = (
    "model_id",
    "dataset_id",
    "n_train",
    "n_test",
    "tp",
    "fp",
    "tn",
    "fn",
    "accuracy_pct",
    "precision_pct",
    "recall_pct",
    "f1_pct",
)


@dataclass(frozen=True)
class ComparisonReport:
    """Rows for several models on one or more datasets, plus run
    provenance (config digest and seeds) so a report is traceable."""

    rows: tuple[ReportRow, ...]
    provenance: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        seen = set()
        for row in self.rows:
            key = (row.model_id, row.dataset_id)
            if key in seen:
                raise ValueError(f"duplicate report row for {key}")
            seen.add(key)

    def _cells(self, row: ReportRow) -> list[str]:
        m = row.metrics
        return [
            row.model_id,
            row.dataset_id,
            str(row.n_train),
            str(row.n_test),
            str(m.counts.tp),
            str(m.counts.fp),
            str(m.counts.tn),
            str(m.counts.fn),
            format_pct(m.accuracy),
            format_pct(m.precision),
            format_pct(m.recall),
            format_pct(m.f1),
        ]

    def to_csv(self) -> str:
        lines = [",".join(_REPORT_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(self._cells(row)))
        for key, value in self.provenance:
            lines.append(f"# {key}={value}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        table = [list(_REPORT_COLUMNS)] + [self._cells(r) for r in self.rows]
        widths = [max(len(row[i]) for row in table) for i in range(len(_REPORT_COLUMNS))]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in table]
        lines[1:1] = ["  ".join("-" * w for w in widths)]
        for key, value in self.provenance:
            lines.append(f"{key}: {value}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ExperimentResult:
    comparison: ComparisonReport
    model: fusion.ClassifierModel
    manifest: DatasetManifest
    flagged_passthrough: int


def compare_models(
    train_sets: Sequence[tuple[str, Sequence]],
    test_sets: Sequence[tuple[str, Sequence]],
    y_train: np.ndarray,
    y_test: np.ndarray,
    train_cfg: fusion.TrainConfig,
    dataset_id: str,
    baseline_ids: Sequence[str] = (),
    ensemble_model: fusion.ClassifierModel | None = None,
) -> tuple[list[ReportRow], fusion.ClassifierModel]:
    """Score the fused ensemble against each single backbone and any
    requested baselines, on identical train/test material.

    train_sets/test_sets are (backbone_id, FeatureVector list) pairs.
    Singles are retrained with the same head settings on one feature set
    each; baselines train on the fused features. An already trained
    ensemble model can be passed in to avoid retraining it.
    """
    fused_train = fusion.fuse([fs for _, fs in train_sets], y_train)
    fused_test = fusion.fuse([fs for _, fs in test_sets], y_test)
    model = ensemble_model or fusion.train_classifier(fused_train, train_cfg)
    x_test = np.stack([f.values for f in fused_test]).astype(np.float64)
    if x_test.shape[1] != model.input_dim:
        raise ValueError(
            f"ensemble model expects {model.input_dim} dims, fused test has {x_test.shape[1]}"
        )
    y_test_sorted = np.array([int(f.label) for f in fused_test])
    preds, _ = fusion.predict_batch(model, x_test)
    rows = [
        ReportRow(
            "ensemble",
            dataset_id,
            len(fused_train),
            len(fused_test),
            compute_metrics(confusion(y_test_sorted, preds)),
        )
    ]
    for backbone_id, tr in train_sets:
        te = dict(test_sets)[backbone_id]
        single_train = fusion.fuse([tr], y_train)
        single_test = fusion.fuse([te], y_test)
        single_model = fusion.train_classifier(single_train, train_cfg)
        x_te = np.stack([f.values for f in single_test]).astype(np.float64)
        single_preds, _ = fusion.predict_batch(single_model, x_te)
        rows.append(
            ReportRow(
                backbone_id,
                dataset_id,
                len(single_train),
                len(single_test),
                compute_metrics(confusion(y_test_sorted, single_preds)),
            )
        )
    if baseline_ids:
        x_train = np.stack([f.values for f in fused_train]).astype(np.float64)
        y_tr = np.array([int(f.label) for f in fused_train])
        for baseline_id in baseline_ids:
            b_preds = baselines.run_baseline(baseline_id, x_train, y_tr, x_test)
            rows.append(
                ReportRow(
                    baseline_id,
                    dataset_id,
                    len(fused_train),
                    len(fused_test),
                    compute_metrics(confusion(y_test_sorted, b_preds)),
                )
            )
    return rows, model


def run_experiment(
    manifest: DatasetManifest,
    cfg: PipelineConfig,
    work_dir: str | Path,
    baseline_ids: Sequence[str] = (),
) -> ExperimentResult:
    """Run split, optional stain normalization, optional augmentation,
    extraction, fusion, training, and evaluation in one call.

    The report holds one row for the fused ensemble, one per individual
    backbone (same head settings, single feature set), and one per
    requested baseline trained on the fused features.
    """
    from . import augment as augment_mod
    from . import datasets as datasets_mod

    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)

    m = manifest
    if cfg.dataset.magnifications:
        m = datasets_mod.filter_magnification(m, set(cfg.dataset.magnifications))
    if not m.train_records or not m.test_records:
        m = datasets_mod.split(m, cfg.dataset.train_fraction, cfg.dataset.split_seed)

    flagged = 0
    if cfg.stain.enabled:
        ref_source = cfg.stain.reference or m.train_records[0].image_path
        reference = pipeline.fit_reference(ref_source, cfg.stain.params)
        m, flagged = pipeline.normalize_images(
            m, reference, work / "normalized", cfg.stain.params, strict=cfg.stain.strict
        )
    if cfg.augment_enabled:
        m = augment_mod.augment_manifest(m, cfg.augment, work / "augmented")

    loaded = pipeline.load_backbones(cfg.features)
    train_sets, test_sets = [], []
    y_train = y_test = None
    for backbone_id in cfg.features.backbone_ids:
        feats_train, y_train = pipeline.extract_split(loaded[backbone_id], m, "train", cfg.features.tap)
        feats_test, y_test = pipeline.extract_split(loaded[backbone_id], m, "test", cfg.features.tap)
        train_sets.append((backbone_id, feats_train))
        test_sets.append((backbone_id, feats_test))

    dataset_id = next(iter(m.dataset_ids()))
    rows, model = compare_models(
        train_sets, test_sets, y_train, y_test, cfg.train, dataset_id, baseline_ids
    )
    provenance = (
        ("config_digest", config_digest(cfg)),
        ("split_seed", str(cfg.dataset.split_seed)),
        ("train_seed", str(cfg.train.seed)),
        ("passthrough_count", str(flagged)),
    )
    return ExperimentResult(ComparisonReport(tuple(rows), provenance), model, m, flagged)
