"""Command-line interface.

Subcommands cover each pipeline stage plus a cached end-to-end runner.
Exit codes: 0 success, 1 validation or config problems, 2 stage execution
failures, 3 filesystem problems. Progress goes to stderr as JSON lines
(ts, stage, level, message); stdout carries only results.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import (
    augment,
    backbones,
    cache,
    config,
    datasets,
    experiments,
    featurefile,
    fusion,
    pipeline,
    preprocess,
    synthdata,
)


class JsonLogger:
    def __init__(self, stream=None):
        self.stream = stream if stream is not None else sys.stderr

    def log(self, stage: str, level: str, message: str, **fields) -> None:
        entry = {
            "ts": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "stage": stage,
            "level": level,
            "message": message,
        }
        entry.update(fields)
        print(json.dumps(entry, sort_keys=True), file=self.stream)

    def info(self, stage: str, message: str, **fields) -> None:
        self.log(stage, "info", message, **fields)

    def error(self, stage: str, message: str, **fields) -> None:
        self.log(stage, "error", message, **fields)


def _add_train_args(parser: argparse.ArgumentParser) -> None:
    d = fusion.TrainConfig()
    parser.add_argument("--lr", type=float, default=d.learning_rate)
    parser.add_argument("--beta1", type=float, default=d.beta1)
    parser.add_argument("--beta2", type=float, default=d.beta2)
    parser.add_argument("--epsilon", type=float, default=d.epsilon)
    parser.add_argument("--batch-size", type=int, default=d.batch_size)
    parser.add_argument("--epochs", type=int, default=d.max_epochs)
    parser.add_argument("--hidden", type=int, default=d.hidden_units)
    parser.add_argument("--dropout", type=float, default=d.dropout)
    parser.add_argument("--train-seed", type=int, default=d.seed)


def _train_config(args) -> fusion.TrainConfig:
    return fusion.TrainConfig(
        learning_rate=args.lr,
        beta1=args.beta1,
        beta2=args.beta2,
        epsilon=args.epsilon,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        hidden_units=args.hidden,
        dropout=args.dropout,
        seed=args.train_seed,
    )


def _feature_sets_from_files(
    backbone_ids: list[str], paths: list[str]
) -> tuple[list[tuple[str, list[backbones.FeatureVector]]], np.ndarray]:
    """Load one feature file per backbone. Row i becomes sample_ref i, so
    files extracted from the same manifest split line up. All files must
    agree on the label sequence."""
    if len(backbone_ids) != len(paths):
        raise ValueError(f"{len(backbone_ids)} backbone ids for {len(paths)} feature files")
    sets = []
    ref_labels: np.ndarray | None = None
    for backbone_id, path in zip(backbone_ids, paths):
        matrix, labels = featurefile.load_features(path)
        if ref_labels is None:
            ref_labels = labels
        elif not np.array_equal(labels, ref_labels):
            raise ValueError(f"label sequence in {path} disagrees with the first feature file")
        vectors = [
            backbones.FeatureVector(matrix[i], backbone_id, i) for i in range(matrix.shape[0])
        ]
        sets.append((backbone_id, vectors))
    return sets, ref_labels


def _split_ids(raw: str) -> list[str]:
    ids = [b.strip() for b in raw.split(",") if b.strip()]
    if not ids:
        raise ValueError(f"no backbone ids in {raw!r}")
    return ids


def cmd_ingest(args, log: JsonLogger) -> int:
    manifest = datasets.ingest(args.dataset, args.root)
    if args.magnifications:
        mags = {int(m) for m in args.magnifications.split(",")}
        manifest = datasets.filter_magnification(manifest, mags)
    if args.train_fraction is not None:
        manifest = datasets.split(manifest, args.train_fraction, args.seed)
    datasets.write_manifest(manifest, args.out)
    log.info(
        "ingest",
        "manifest written",
        path=args.out,
        records=len(manifest.records),
        train=len(manifest.train_records),
        test=len(manifest.test_records),
    )
    print(
        f"{len(manifest.records)} records "
        f"({len(manifest.train_records)} train / {len(manifest.test_records)} test) -> {args.out}"
    )
    return 0


def cmd_stain_norm(args, log: JsonLogger) -> int:
    manifest = datasets.read_manifest(args.manifest)
    ref_path = args.reference
    if ref_path is None:
        records = manifest.train_records or manifest.records
        ref_path = records[0].image_path
    log.info("stain-norm", "fitting reference", reference=ref_path)
    reference = pipeline.fit_reference(ref_path)
    if args.save_model:
        preprocess.save_stain_model(reference, args.save_model)
    normalized, flagged = pipeline.normalize_images(
        manifest, reference, args.out_dir, strict=args.strict
    )
    datasets.write_manifest(normalized, args.out_manifest)
    log.info("stain-norm", "done", flagged_passthrough=flagged, out=args.out_manifest)
    print(f"{len(normalized.records)} images normalized, {flagged} passed through -> {args.out_manifest}")
    return 0


def cmd_augment(args, log: JsonLogger) -> int:
    manifest = datasets.read_manifest(args.manifest)
    cfg = augment.load_augment_config(args.config) if args.config else augment.AugmentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.copies is not None:
        cfg = dataclasses.replace(cfg, copies_per_image=args.copies)
    grown = augment.augment_manifest(manifest, cfg, args.out_dir)
    datasets.write_manifest(grown, args.out_manifest)
    added = len(grown.records) - len(manifest.records)
    log.info("augment", "done", added=added, out=args.out_manifest)
    print(f"{added} augmented images -> {args.out_manifest}")
    return 0


def cmd_extract(args, log: JsonLogger) -> int:
    manifest = datasets.read_manifest(args.manifest)
    backbone = backbones.load_backbone(args.backbone, args.weights, args.weights_path)
    features, labels = pipeline.extract_split(backbone, manifest, args.split, args.tap)
    matrix = np.stack([f.values for f in features])
    featurefile.save_features(args.out, matrix, labels)
    log.info("extract", "features written", backbone=args.backbone, shape=list(matrix.shape))
    print(f"{matrix.shape[0]}x{matrix.shape[1]} {args.backbone} features -> {args.out}")
    return 0


def cmd_train(args, log: JsonLogger) -> int:
    ids = _split_ids(args.backbones)
    sets, labels = _feature_sets_from_files(ids, args.features)
    fused = fusion.fuse([fs for _, fs in sets], labels)
    cfg = _train_config(args)
    model = fusion.train_classifier(fused, cfg)
    fusion.save_classifier(model, args.out)
    last = model.history[-1]
    log.info("train", "model written", epochs=last.epoch, loss=last.loss, accuracy=last.accuracy)
    print(f"trained {model.input_dim}-d head for {last.epoch} epochs "
          f"(loss {last.loss:.4f}, train acc {last.accuracy:.4f}) -> {args.out}")
    return 0


def cmd_predict(args, log: JsonLogger) -> int:
    model = fusion.load_classifier(args.model)
    matrix, _ = featurefile.load_features(args.features)
    preds, probs = fusion.predict_batch(model, matrix)
    lines = ["index,predicted_label,p_benign,p_malignant"]
    for i in range(matrix.shape[0]):
        lines.append(f"{i},{int(preds[i])},{float(probs[i, 0])!r},{float(probs[i, 1])!r}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("predict", "predictions written", n=int(matrix.shape[0]), out=args.out)
    print(f"{matrix.shape[0]} predictions -> {args.out}")
    return 0


def cmd_evaluate(args, log: JsonLogger) -> int:
    model = fusion.load_classifier(args.model)
    matrix, labels = featurefile.load_features(args.features)
    preds, _ = fusion.predict_batch(model, matrix)
    report = experiments.compute_metrics(experiments.confusion(labels, preds))
    experiments.save_metrics(report, args.out)
    log.info("evaluate", "metrics written", out=args.out)
    print(
        f"accuracy {experiments.format_pct(report.accuracy)}%  "
        f"precision {experiments.format_pct(report.precision)}%  "
        f"recall {experiments.format_pct(report.recall)}%  "
        f"f1 {experiments.format_pct(report.f1)}%"
    )
    return 0


def cmd_compare(args, log: JsonLogger) -> int:
    ids = _split_ids(args.backbones)
    train_sets, y_train = _feature_sets_from_files(ids, args.train)
    test_sets, y_test = _feature_sets_from_files(ids, args.test)
    cfg = _train_config(args)
    rows, _ = experiments.compare_models(
        train_sets, test_sets, y_train, y_test, cfg, args.dataset_id, args.baseline or ()
    )
    report = experiments.ComparisonReport(tuple(rows), (("train_seed", str(cfg.seed)),))
    Path(args.out).write_text(report.to_csv(), encoding="utf-8")
    if args.text:
        Path(args.text).write_text(report.to_text(), encoding="utf-8")
    log.info("compare", "report written", rows=len(rows), out=args.out)
    print(report.to_text(), end="")
    return 0


def cmd_make_fixture(args, log: JsonLogger) -> int:
    root = synthdata.make_fixture_tree(args.out, args.per_class, args.seed, args.side)
    log.info("make-fixture", "fixture written", root=str(root), per_class=args.per_class)
    print(f"fixture with {2 * args.per_class} images -> {root}")
    return 0


def cmd_init_config(args, log: JsonLogger) -> int:
    path = Path(args.out)
    if path.exists() and not args.force:
        raise FileExistsError(f"{path} exists; use --force to overwrite")
    config.write_example_config(path)
    print(f"example config -> {path}")
    return 0


def cmd_run_all(args, log: JsonLogger) -> int:
    cfg = config.load_pipeline_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)

    stages = ["ingest"]
    if cfg.stain.enabled:
        stages += ["reference", "normalize"]
    if cfg.augment_enabled:
        stages.append("augment")
    stages += [f"extract-{b}" for b in cfg.features.backbone_ids] + ["train", "report"]

    if args.dry_run:
        for name in stages:
            print(f"plan: {name}")
        log.info("run-all", "dry run; nothing executed", stages=stages)
        return 0

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage_cache = cache.StageCache(out / "cache", workspace=out)
    cdig = config.config_digest(cfg)
    ledger_path = out / "run_ledger.jsonl"
    ledger_entries: list[dict] = []

    def run_stage(name: str, key_parts: dict, producer):
        log.info(name, "start")
        try:
            cached, payload, outputs = stage_cache.run(name, key_parts, producer)
        except pipeline.StageError:
            raise
        except Exception as exc:
            log.error(name, str(exc))
            raise pipeline.StageError(name, str(exc)) from exc
        entry = {
            "stage": name,
            "cached": cached,
            "artifacts": outputs,
            "config_digest": cdig,
            "payload": payload,
        }
        ledger_entries.append(entry)
        ledger_path.write_text(
            "".join(json.dumps(e, sort_keys=True) + "\n" for e in ledger_entries),
            encoding="utf-8",
        )
        log.info(name, "cached" if cached else "completed", artifacts=outputs)
        return payload

    manifest_path = out / "manifest.csv"

    def produce_ingest():
        m = datasets.ingest(cfg.dataset.dataset_id, cfg.dataset.root)
        if cfg.dataset.magnifications:
            m = datasets.filter_magnification(m, set(cfg.dataset.magnifications))
        if not m.train_records or not m.test_records:
            m = datasets.split(m, cfg.dataset.train_fraction, cfg.dataset.split_seed)
        datasets.write_manifest(m, manifest_path)
        return {"records": len(m.records)}, [manifest_path]

    run_stage(
        "ingest",
        {"dataset": dataclasses.asdict(cfg.dataset), "tree": cache.digest_tree(cfg.dataset.root)},
        produce_ingest,
    )
    manifest = datasets.read_manifest(manifest_path)
    current_manifest = manifest_path
    flagged = 0

    if cfg.stain.enabled:
        ref_path = cfg.stain.reference or manifest.train_records[0].image_path
        model_path = out / "stain_model.txt"

        def produce_reference():
            model = pipeline.fit_reference(ref_path, cfg.stain.params)
            preprocess.save_stain_model(model, model_path)
            return {"reference": str(ref_path)}, [model_path]

        run_stage(
            "reference",
            {
                "reference": cache.sha256_file(ref_path),
                "params": dataclasses.asdict(cfg.stain.params),
            },
            produce_reference,
        )
        stain_model = preprocess.load_stain_model(model_path)
        norm_manifest_path = out / "manifest_normalized.csv"

        def produce_normalize():
            m2, n_flagged = pipeline.normalize_images(
                manifest, stain_model, out / "normalized", cfg.stain.params, cfg.stain.strict
            )
            datasets.write_manifest(m2, norm_manifest_path)
            outputs = [norm_manifest_path] + sorted((out / "normalized").glob("*.png"))
            return {"flagged": n_flagged}, outputs

        payload = run_stage(
            "normalize",
            {
                "manifest": cache.sha256_file(current_manifest),
                "stain_model": cache.sha256_file(model_path),
                "params": dataclasses.asdict(cfg.stain.params),
                "strict": cfg.stain.strict,
            },
            produce_normalize,
        )
        flagged = payload["flagged"]
        current_manifest = norm_manifest_path
        manifest = datasets.read_manifest(current_manifest)

    if cfg.augment_enabled:
        aug_manifest_path = out / "manifest_augmented.csv"

        def produce_augment():
            m3 = augment.augment_manifest(manifest, cfg.augment, out / "augmented")
            datasets.write_manifest(m3, aug_manifest_path)
            outputs = [aug_manifest_path] + sorted((out / "augmented").glob("*.png"))
            return {"records": len(m3.records)}, outputs

        run_stage(
            "augment",
            {
                "manifest": cache.sha256_file(current_manifest),
                "augment": dataclasses.asdict(cfg.augment),
            },
            produce_augment,
        )
        current_manifest = aug_manifest_path
        manifest = datasets.read_manifest(current_manifest)

    features_dir = out / "features"
    features_dir.mkdir(exist_ok=True)
    manifest_digest = cache.sha256_file(current_manifest)
    train_paths = {b: features_dir / f"{b}-train.hfv" for b in cfg.features.backbone_ids}
    test_paths = {b: features_dir / f"{b}-test.hfv" for b in cfg.features.backbone_ids}

    for backbone_id in cfg.features.backbone_ids:

        def produce_extract(backbone_id=backbone_id):
            backbone = backbones.load_backbone(
                backbone_id, cfg.features.weights, cfg.features.weights_path
            )
            tr, y_tr = pipeline.extract_split(backbone, manifest, "train", cfg.features.tap)
            te, y_te = pipeline.extract_split(backbone, manifest, "test", cfg.features.tap)
            featurefile.save_features(train_paths[backbone_id], np.stack([f.values for f in tr]), y_tr)
            featurefile.save_features(test_paths[backbone_id], np.stack([f.values for f in te]), y_te)
            return (
                {"train": len(tr), "test": len(te)},
                [train_paths[backbone_id], test_paths[backbone_id]],
            )

        run_stage(
            f"extract-{backbone_id}",
            {
                "manifest": manifest_digest,
                "backbone": backbone_id,
                "tap": cfg.features.tap,
                "weights": cfg.features.weights,
                "weights_path": cfg.features.weights_path,
            },
            produce_extract,
        )

    ids = list(cfg.features.backbone_ids)
    model_path = out / "model.hfm"

    def produce_train():
        sets, labels = _feature_sets_from_files(ids, [str(train_paths[b]) for b in ids])
        fused = fusion.fuse([fs for _, fs in sets], labels)
        model = fusion.train_classifier(fused, cfg.train)
        fusion.save_classifier(model, model_path)
        last = model.history[-1]
        return {"final_loss": last.loss, "final_accuracy": last.accuracy}, [model_path]

    run_stage(
        "train",
        {
            "features": [cache.sha256_file(train_paths[b]) for b in ids],
            "backbones": ids,
            "train": dataclasses.asdict(cfg.train),
        },
        produce_train,
    )

    report_csv = out / "report.csv"
    report_txt = out / "report.txt"
    metrics_path = out / "metrics.json"

    def produce_report():
        model = fusion.load_classifier(model_path)
        train_sets, y_train = _feature_sets_from_files(ids, [str(train_paths[b]) for b in ids])
        test_sets, y_test = _feature_sets_from_files(ids, [str(test_paths[b]) for b in ids])
        rows, _ = experiments.compare_models(
            train_sets, test_sets, y_train, y_test, cfg.train,
            cfg.dataset.dataset_id, ensemble_model=model,
        )
        provenance = (
            ("config_digest", cdig),
            ("split_seed", str(cfg.dataset.split_seed)),
            ("train_seed", str(cfg.train.seed)),
            ("passthrough_count", str(flagged)),
        )
        report = experiments.ComparisonReport(tuple(rows), provenance)
        report_csv.write_text(report.to_csv(), encoding="utf-8")
        report_txt.write_text(report.to_text(), encoding="utf-8")
        ensemble = rows[0].metrics
        experiments.save_metrics(
            ensemble,
            metrics_path,
            extra={
                "model_id": "ensemble",
                "dataset_id": cfg.dataset.dataset_id,
                "config_digest": cdig,
                "passthrough_count": flagged,
            },
        )
        return {"f1_pct": experiments.format_pct(ensemble.f1)}, [report_csv, report_txt, metrics_path]

    payload = run_stage(
        "report",
        {
            "model": cache.sha256_file(model_path),
            "features": [cache.sha256_file(p) for b in ids for p in (train_paths[b], test_paths[b])],
            "dataset": cfg.dataset.dataset_id,
            "train": dataclasses.asdict(cfg.train),
            "passthrough": flagged,
        },
        produce_report,
    )
    print(f"ensemble f1 {payload['f1_pct']}% -> {report_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histofuse",
        description="Benign/malignant histology classification pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan a dataset directory into a manifest CSV")
    p.add_argument("--dataset", required=True, choices=datasets.DATASET_IDS)
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-fraction", type=float, default=None,
                   help="if set, also assign a stratified train/test split")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--magnifications", default=None, help="breakhis only, e.g. 40,100")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stain-norm", help="stain-normalize every image in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--reference", default=None, help="reference image (default: first train image)")
    p.add_argument("--save-model", default=None, help="also write the fitted reference stain model")
    p.add_argument("--strict", action="store_true",
                   help="fail instead of passing through images that cannot be fitted")
    p.set_defaults(func=cmd_stain_norm)

    p = sub.add_parser("augment", help="write augmented copies of the train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--config", default=None, help="flat key=value augmentation config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--copies", type=int, default=None)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("extract", help="extract features for one backbone and split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", required=True, choices=backbones.BACKBONE_IDS)
    p.add_argument("--split", required=True, choices=("train", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--tap", default="pooled", choices=backbones.TAPS)
    p.add_argument("--weights", default="default")
    p.add_argument("--weights-path", default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the fused classifier from feature files")
    p.add_argument("--features", nargs="+", required=True, help="one .hfv per backbone, in order")
    p.add_argument("--backbones", required=True, help="comma-separated ids matching --features")
    p.add_argument("--out", required=True)
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict labels for a feature file")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="compute metrics for a model on a labeled feature file")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="ensemble vs single backbones vs baselines")
    p.add_argument("--backbones", required=True)
    p.add_argument("--train", nargs="+", required=True, help="train .hfv files, one per backbone")
    p.add_argument("--test", nargs="+", required=True, help="test .hfv files, one per backbone")
    p.add_argument("--dataset-id", default="pcam")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--text", default=None, help="also write an aligned text table")
    p.add_argument("--baseline", action="append", default=None, help="baseline id (repeatable)")
    _add_train_args(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("run-all", help="cached end-to-end run from an INI config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override every stage seed")
    p.add_argument("--dry-run", action="store_true", help="print the stage plan and exit")
    p.set_defaults(func=cmd_run_all)

    p = sub.add_parser("make-fixture", help="write a small synthetic two-class image tree")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--seed", type=int, default=20240101)
    p.add_argument("--side", type=int, default=96)
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("init-config", help="write an example pipeline config")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    log = JsonLogger()
    try:
        return args.func(args, log)
    except config.ConfigError as exc:
        log.error("cli", f"config error: {exc}")
        return 1
    except (ValueError, datasets.IngestError, datasets.SplitError, backbones.BackboneError) as exc:
        log.error("cli", f"validation error: {exc}")
        return 1
    except pipeline.StageError as exc:
        log.error(exc.stage, str(exc))
        return 2
    except (preprocess.StainError, RuntimeError) as exc:
        log.error("cli", f"stage error: {exc}")
        return 2
    except OSError as exc:
        log.error("cli", f"io error: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
