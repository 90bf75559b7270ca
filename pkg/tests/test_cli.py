"""Command-line interface: every subcommand end to end, exit codes, logs."""

import json
import subprocess
import sys

import numpy as np
import pytest

from histofuse import datasets, featurefile, fusion, preprocess, synthdata
from histofuse.cli import main


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "images"
    return synthdata.make_fixture_tree(root, n_per_class=6, seed=21, side=64)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, tree):
    """A chained workspace: manifest, feature files, and a trained model
    produced through the real CLI."""
    ws = tmp_path_factory.mktemp("ws")
    manifest = ws / "manifest.csv"
    assert main([
        "ingest", "--dataset", "pcam", "--root", str(tree),
        "--out", str(manifest), "--train-fraction", "0.5", "--seed", "3",
    ]) == 0
    for backbone in ("stub_a", "stub_b"):
        for split in ("train", "test"):
            assert main([
                "extract", "--manifest", str(manifest), "--backbone", backbone,
                "--split", split, "--out", str(ws / f"{backbone}-{split}.hfv"),
            ]) == 0
    assert main([
        "train",
        "--features", str(ws / "stub_a-train.hfv"), str(ws / "stub_b-train.hfv"),
        "--backbones", "stub_a,stub_b",
        "--out", str(ws / "model.hfm"),
        "--epochs", "5", "--batch-size", "4", "--dropout", "0.0",
    ]) == 0
    return ws


class TestIngest:
    def test_writes_split_manifest(self, tree, tmp_path, capsys):
        out = tmp_path / "m.csv"
        rc = main([
            "ingest", "--dataset", "pcam", "--root", str(tree),
            "--out", str(out), "--train-fraction", "0.5", "--seed", "1",
        ])
        assert rc == 0
        manifest = datasets.read_manifest(out)
        assert len(manifest.records) == 12
        assert len(manifest.train_records) == 6
        assert "12 records" in capsys.readouterr().out

    def test_no_fraction_leaves_unsplit(self, tree, tmp_path):
        out = tmp_path / "m.csv"
        assert main(["ingest", "--dataset", "pcam", "--root", str(tree), "--out", str(out)]) == 0
        manifest = datasets.read_manifest(out)
        assert all(r.split == "" for r in manifest.records)

    def test_empty_root_exits_1(self, tmp_path):
        (tmp_path / "empty").mkdir()
        rc = main([
            "ingest", "--dataset", "pcam", "--root", str(tmp_path / "empty"),
            "--out", str(tmp_path / "m.csv"),
        ])
        assert rc == 1

    def test_logs_are_json_lines(self, tree, tmp_path, capsys):
        main(["ingest", "--dataset", "pcam", "--root", str(tree), "--out", str(tmp_path / "m.csv")])
        err_lines = [l for l in capsys.readouterr().err.splitlines() if l.strip()]
        for line in err_lines:
            entry = json.loads(line)
            assert {"ts", "stage", "level", "message"} <= set(entry)


class TestStainNorm:
    def test_normalizes_and_saves_model(self, workspace, tmp_path, capsys):
        out_manifest = tmp_path / "norm.csv"
        model_path = tmp_path / "ref.stain"
        rc = main([
            "stain-norm", "--manifest", str(workspace / "manifest.csv"),
            "--out-dir", str(tmp_path / "norm"),
            "--out-manifest", str(out_manifest),
            "--save-model", str(model_path),
        ])
        assert rc == 0
        assert "0 passed through" in capsys.readouterr().out
        model = preprocess.load_stain_model(model_path)
        assert model.stain_matrix.shape == (3, 2)
        normalized = datasets.read_manifest(out_manifest)
        assert len(normalized.records) == 12

    def test_strict_with_blank_tile_exits_2(self, tmp_path):
        root = synthdata.make_fixture_tree(tmp_path / "imgs", n_per_class=2, seed=2, side=64)
        blank = preprocess.ImageTensor(
            np.full((64, 64, 3), 251, dtype=np.uint8), "uint8", "rgb"
        )
        preprocess.save_image(blank, root / "benign" / "zz_blank.png")
        manifest_path = tmp_path / "m.csv"
        assert main(["ingest", "--dataset", "pcam", "--root", str(root), "--out", str(manifest_path)]) == 0
        rc = main([
            "stain-norm", "--manifest", str(manifest_path),
            "--out-dir", str(tmp_path / "norm"), "--out-manifest", str(tmp_path / "n.csv"),
            "--strict",
        ])
        assert rc == 2


class TestAugment:
    def test_grows_manifest(self, workspace, tmp_path, capsys):
        out_manifest = tmp_path / "aug.csv"
        rc = main([
            "augment", "--manifest", str(workspace / "manifest.csv"),
            "--out-dir", str(tmp_path / "aug"), "--out-manifest", str(out_manifest),
            "--copies", "2", "--seed", "5",
        ])
        assert rc == 0
        grown = datasets.read_manifest(out_manifest)
        assert len(grown.records) == 12 + 6 * 2
        assert "12 augmented images" in capsys.readouterr().out

    def test_config_file_drives_augmentation(self, workspace, tmp_path):
        conf = tmp_path / "aug.conf"
        conf.write_text("copies_per_image = 1\nseed = 9\n")
        rc = main([
            "augment", "--manifest", str(workspace / "manifest.csv"),
            "--out-dir", str(tmp_path / "aug"), "--out-manifest", str(tmp_path / "a.csv"),
            "--config", str(conf),
        ])
        assert rc == 0
        assert len(datasets.read_manifest(tmp_path / "a.csv").records) == 18


class TestExtract:
    def test_feature_file_contents(self, workspace):
        matrix, labels = featurefile.load_features(workspace / "stub_a-train.hfv")
        assert matrix.shape == (6, 64)
        assert set(labels.tolist()) == {0, 1}

    def test_train_and_test_cover_different_rows(self, workspace):
        tr, ltr = featurefile.load_features(workspace / "stub_a-train.hfv")
        te, lte = featurefile.load_features(workspace / "stub_a-test.hfv")
        assert tr.shape == te.shape == (6, 64)
        assert not np.array_equal(tr, te)


class TestTrainPredictEvaluate:
    def test_model_loadable(self, workspace):
        model = fusion.load_classifier(workspace / "model.hfm")
        assert model.input_dim == 128
        assert model.layout == (("stub_a", 64), ("stub_b", 64))
        assert len(model.history) == 5

    def test_predict_csv(self, workspace, tmp_path, capsys):
        # fuse the two test files column-wise the same way training did
        a, labels = featurefile.load_features(workspace / "stub_a-test.hfv")
        b, _ = featurefile.load_features(workspace / "stub_b-test.hfv")
        fused = np.concatenate([a, b], axis=1)
        featurefile.save_features(tmp_path / "fused-test.hfv", fused, labels)
        out = tmp_path / "preds.csv"
        rc = main([
            "predict", "--model", str(workspace / "model.hfm"),
            "--features", str(tmp_path / "fused-test.hfv"), "--out", str(out),
        ])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "index,predicted_label,p_benign,p_malignant"
        assert len(lines) == 7
        for line in lines[1:]:
            idx, pred, p0, p1 = line.split(",")
            assert pred in ("0", "1")
            assert float(p0) + float(p1) == pytest.approx(1.0)

    def test_evaluate_metrics_json(self, workspace, tmp_path, capsys):
        a, labels = featurefile.load_features(workspace / "stub_a-test.hfv")
        b, _ = featurefile.load_features(workspace / "stub_b-test.hfv")
        featurefile.save_features(
            tmp_path / "fused-test.hfv", np.concatenate([a, b], axis=1), labels
        )
        out = tmp_path / "metrics.json"
        rc = main([
            "evaluate", "--model", str(workspace / "model.hfm"),
            "--features", str(tmp_path / "fused-test.hfv"), "--out", str(out),
        ])
        assert rc == 0
        payload = json.loads(out.read_text())
        assert {"tp", "fp", "tn", "fn", "accuracy_pct", "f1_pct"} <= set(payload)
        assert payload["tp"] + payload["fp"] + payload["tn"] + payload["fn"] == 6
        assert "accuracy" in capsys.readouterr().out

    def test_dim_mismatch_exits_1(self, workspace, tmp_path):
        rc = main([
            "predict", "--model", str(workspace / "model.hfm"),
            "--features", str(workspace / "stub_a-test.hfv"),  # 64-d, model wants 128
            "--out", str(tmp_path / "p.csv"),
        ])
        assert rc == 1

    def test_missing_feature_file_exits_3(self, workspace, tmp_path):
        rc = main([
            "predict", "--model", str(workspace / "model.hfm"),
            "--features", str(tmp_path / "nope.hfv"), "--out", str(tmp_path / "p.csv"),
        ])
        assert rc == 3

    def test_backbone_count_mismatch_exits_1(self, workspace, tmp_path):
        rc = main([
            "train", "--features", str(workspace / "stub_a-train.hfv"),
            "--backbones", "stub_a,stub_b", "--out", str(tmp_path / "m.hfm"),
        ])
        assert rc == 1


class TestCompare:
    def test_report_files(self, workspace, tmp_path, capsys):
        out_csv = tmp_path / "report.csv"
        out_txt = tmp_path / "report.txt"
        rc = main([
            "compare", "--backbones", "stub_a,stub_b",
            "--train", str(workspace / "stub_a-train.hfv"), str(workspace / "stub_b-train.hfv"),
            "--test", str(workspace / "stub_a-test.hfv"), str(workspace / "stub_b-test.hfv"),
            "--out", str(out_csv), "--text", str(out_txt),
            "--baseline", "decision_tree",
            "--epochs", "5", "--batch-size", "4", "--dropout", "0.0",
        ])
        assert rc == 0
        lines = out_csv.read_text().splitlines()
        models = [l.split(",")[0] for l in lines[1:] if not l.startswith("#")]
        assert models == ["ensemble", "stub_a", "stub_b", "decision_tree"]
        assert out_txt.read_text().startswith("model_id")
        assert "ensemble" in capsys.readouterr().out

    def test_unknown_baseline_exits_1(self, workspace, tmp_path):
        rc = main([
            "compare", "--backbones", "stub_a",
            "--train", str(workspace / "stub_a-train.hfv"),
            "--test", str(workspace / "stub_a-test.hfv"),
            "--out", str(tmp_path / "r.csv"), "--baseline", "svm",
            "--epochs", "2",
        ])
        assert rc == 1


class TestFixtureAndConfig:
    def test_make_fixture(self, tmp_path, capsys):
        rc = main(["make-fixture", "--out", str(tmp_path / "fx"), "--per-class", "2", "--side", "48"])
        assert rc == 0
        pngs = sorted((tmp_path / "fx").rglob("*.png"))
        assert len(pngs) == 4
        assert {p.parent.name for p in pngs} == {"benign", "malignant"}

    def test_init_config_and_reload(self, tmp_path):
        out = tmp_path / "pipeline.ini"
        assert main(["init-config", "--out", str(out)]) == 0
        assert out.is_file()
        # refuses to clobber without --force (filesystem problem: exit 3)
        assert main(["init-config", "--out", str(out)]) == 3
        assert main(["init-config", "--out", str(out), "--force"]) == 0


def run_all_config(tree, out_dir, epochs=5, copies=1, reference=None) -> str:
    stain = "[stain]\nenabled = true\n"
    if reference is not None:
        stain += f"reference = {reference}\n"
    return (
        f"[dataset]\nid = pcam\nroot = {tree}\ntrain_fraction = 0.5\nsplit_seed = 3\n"
        f"{stain}"
        f"[augment]\nenabled = true\ncopies_per_image = {copies}\nseed = 1\n"
        f"[features]\nbackbones = stub_a,stub_b\n"
        f"[train]\nmax_epochs = {epochs}\nbatch_size = 8\ndropout = 0.0\nseed = 2\n"
        f"[run]\nout_dir = {out_dir}\n"
    )


class TestRunAll:
    def test_dry_run_prints_plan(self, tree, tmp_path, capsys):
        conf = tmp_path / "p.ini"
        conf.write_text(run_all_config(tree, tmp_path / "out"))
        rc = main(["run-all", "--config", str(conf), "--dry-run"])
        assert rc == 0
        plan = [l for l in capsys.readouterr().out.splitlines() if l.startswith("plan: ")]
        assert plan == [
            "plan: ingest",
            "plan: reference",
            "plan: normalize",
            "plan: augment",
            "plan: extract-stub_a",
            "plan: extract-stub_b",
            "plan: train",
            "plan: report",
        ]
        assert not (tmp_path / "out").exists()

    def test_end_to_end_and_cache(self, tree, tmp_path, capsys):
        conf = tmp_path / "p.ini"
        out = tmp_path / "out"
        conf.write_text(run_all_config(tree, out))
        assert main(["run-all", "--config", str(conf)]) == 0
        for artifact in (
            "manifest.csv",
            "stain_model.txt",
            "manifest_normalized.csv",
            "manifest_augmented.csv",
            "features/stub_a-train.hfv",
            "model.hfm",
            "report.csv",
            "report.txt",
            "metrics.json",
            "run_ledger.jsonl",
        ):
            assert (out / artifact).is_file(), artifact
        first = capsys.readouterr()
        assert "ensemble f1" in first.out

        ledger = [json.loads(l) for l in (out / "run_ledger.jsonl").read_text().splitlines()]
        assert [e["stage"] for e in ledger] == [
            "ingest", "reference", "normalize", "augment",
            "extract-stub_a", "extract-stub_b", "train", "report",
        ]
        assert all(not e["cached"] for e in ledger)
        digest = ledger[0]["config_digest"]
        assert all(e["config_digest"] == digest for e in ledger)

        report_before = (out / "report.csv").read_bytes()
        assert main(["run-all", "--config", str(conf)]) == 0
        ledger2 = [json.loads(l) for l in (out / "run_ledger.jsonl").read_text().splitlines()]
        assert all(e["cached"] for e in ledger2)
        assert (out / "report.csv").read_bytes() == report_before

    def test_seed_override_busts_cache(self, tree, tmp_path):
        conf = tmp_path / "p.ini"
        out = tmp_path / "out"
        conf.write_text(run_all_config(tree, out))
        assert main(["run-all", "--config", str(conf)]) == 0
        assert main(["run-all", "--config", str(conf), "--seed", "99"]) == 0
        ledger = [json.loads(l) for l in (out / "run_ledger.jsonl").read_text().splitlines()]
        assert not ledger[0]["cached"]  # new split seed means new ingest key

    def test_edited_input_tree_invalidates_ingest(self, tmp_path):
        root = synthdata.make_fixture_tree(tmp_path / "imgs", n_per_class=3, seed=8, side=64)
        conf = tmp_path / "p.ini"
        out = tmp_path / "out"
        conf.write_text(run_all_config(root, out, epochs=2))
        assert main(["run-all", "--config", str(conf)]) == 0
        # add one more image: the tree digest changes, ingest must rerun
        extra = synthdata.make_fixture_image(np.random.default_rng(77), label=0, side=64)
        preprocess.save_image(extra, root / "benign" / "extra.png")
        assert main(["run-all", "--config", str(conf)]) == 0
        ledger = [json.loads(l) for l in (out / "run_ledger.jsonl").read_text().splitlines()]
        by_stage = {e["stage"]: e for e in ledger}
        assert not by_stage["ingest"]["cached"]
        assert by_stage["ingest"]["payload"]["records"] == 7

    def test_missing_config_exits_3(self, tmp_path):
        assert main(["run-all", "--config", str(tmp_path / "absent.ini")]) == 3

    def test_bad_config_exits_1(self, tmp_path):
        conf = tmp_path / "p.ini"
        conf.write_text("[dataset]\nid = pcam\nroot = /data\n[features]\nbackbones = resnet\n")
        assert main(["run-all", "--config", str(conf)]) == 1

    def test_stage_failure_exits_2_and_names_stage(self, tree, tmp_path, capsys):
        # point the stain reference at a blank tile: the reference fit has no
        # tissue to work with and the stage must fail loudly
        blank = preprocess.ImageTensor(
            np.full((64, 64, 3), 251, dtype=np.uint8), "uint8", "rgb"
        )
        preprocess.save_image(blank, tmp_path / "blank.png")
        conf = tmp_path / "p.ini"
        conf.write_text(
            run_all_config(tree, tmp_path / "out", epochs=2, reference=tmp_path / "blank.png")
        )
        rc = main(["run-all", "--config", str(conf)])
        assert rc == 2
        err_lines = [json.loads(l) for l in capsys.readouterr().err.splitlines()]
        assert any(e["level"] == "error" and e["stage"] == "reference" for e in err_lines)


class TestConsoleEntryPoint:
    def test_installed_script_help(self):
        proc = subprocess.run(
            [sys.executable, "-m", "histofuse.cli", "--help"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "run-all" in proc.stdout
