"""Pipeline config parsing, validation vocabulary, and digests."""

import dataclasses

import pytest

from histofuse import config
from histofuse.config import (
    ConfigError,
    DatasetConfig,
    FeatureConfig,
    PipelineConfig,
    StainConfig,
    config_digest,
    load_pipeline_config,
)


def write(tmp_path, text):
    path = tmp_path / "pipeline.ini"
    path.write_text(text)
    return path


MINIMAL = "[dataset]\nid = pcam\nroot = /data/pcam\n"


class TestDataclasses:
    def test_dataset_validation(self):
        with pytest.raises(ConfigError, match="dataset.id"):
            DatasetConfig("imagenet", "/data")
        with pytest.raises(ConfigError, match="root"):
            DatasetConfig("pcam", "")
        with pytest.raises(ConfigError, match="train_fraction"):
            DatasetConfig("pcam", "/data", train_fraction=1.0)
        with pytest.raises(ConfigError, match="magnifications"):
            DatasetConfig("pcam", "/data", magnifications=(40,))
        DatasetConfig("breakhis", "/data", magnifications=(40, 100))

    def test_feature_validation(self):
        with pytest.raises(ConfigError, match="at least one"):
            FeatureConfig(backbone_ids=())
        with pytest.raises(ConfigError, match="duplicate"):
            FeatureConfig(backbone_ids=("stub_a", "stub_a"))
        with pytest.raises(ConfigError, match="unknown backbones"):
            FeatureConfig(backbone_ids=("resnet",))
        with pytest.raises(ConfigError, match="tap"):
            FeatureConfig(tap="logits")
        with pytest.raises(ConfigError, match="weights"):
            FeatureConfig(weights="xavier")

    def test_with_seed_overrides_every_stage(self):
        cfg = PipelineConfig(dataset=DatasetConfig("pcam", "/data"))
        out = cfg.with_seed(99)
        assert out.dataset.split_seed == 99
        assert out.augment.seed == 99
        assert out.train.seed == 99
        # untouched fields survive
        assert out.dataset.root == "/data"
        assert out.train.beta1 == 0.6


class TestDigest:
    def test_stable_and_sensitive(self):
        a = PipelineConfig(dataset=DatasetConfig("pcam", "/data"))
        b = PipelineConfig(dataset=DatasetConfig("pcam", "/data"))
        c = PipelineConfig(dataset=DatasetConfig("pcam", "/data"), out_dir="elsewhere")
        assert config_digest(a) == config_digest(b)
        assert config_digest(a) != config_digest(c)
        assert len(config_digest(a)) == 64

    def test_seed_changes_digest(self):
        cfg = PipelineConfig(dataset=DatasetConfig("pcam", "/data"))
        assert config_digest(cfg) != config_digest(cfg.with_seed(1))


class TestLoadFile:
    def test_minimal_config_gets_defaults(self, tmp_path):
        cfg = load_pipeline_config(write(tmp_path, MINIMAL))
        assert cfg.dataset.dataset_id == "pcam"
        assert cfg.dataset.train_fraction == 0.8
        assert cfg.stain.enabled is True
        assert cfg.stain.params.io_intensity == 240.0
        assert cfg.augment_enabled is True
        assert cfg.features.backbone_ids == ("stub_a", "stub_b", "stub_c")
        assert cfg.train.learning_rate == 1e-4
        assert cfg.train.beta1 == 0.6
        assert cfg.train.beta2 == 0.8
        assert cfg.out_dir == "runs/out"

    def test_full_override(self, tmp_path):
        cfg = load_pipeline_config(
            write(
                tmp_path,
                """
[dataset]
id = breakhis
root = /data/bh
train_fraction = 0.7
split_seed = 3
magnifications = 40, 400

[stain]
enabled = false

[augment]
enabled = false
copies_per_image = 5

[features]
backbones = stub_a
tap = head
weights = random

[train]
learning_rate = 0.001
max_epochs = 10
dropout = 0.0

[run]
out_dir = /tmp/run1
""",
            )
        )
        assert cfg.dataset.magnifications == (40, 400)
        assert cfg.stain.enabled is False
        assert cfg.augment_enabled is False
        assert cfg.augment.copies_per_image == 5
        assert cfg.features.backbone_ids == ("stub_a",)
        assert cfg.features.tap == "head"
        assert cfg.train.max_epochs == 10
        assert cfg.train.dropout == 0.0
        assert cfg.out_dir == "/tmp/run1"

    def test_inline_comments_stripped(self, tmp_path):
        cfg = load_pipeline_config(
            write(tmp_path, MINIMAL + "[train]\nseed = 5  # the lucky one\n")
        )
        assert cfg.train.seed == 5

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_pipeline_config(tmp_path / "absent.ini")

    def test_unknown_section(self, tmp_path):
        with pytest.raises(ConfigError, match=r"unknown section \[model\]"):
            load_pipeline_config(write(tmp_path, MINIMAL + "[model]\nx = 1\n"))

    def test_unknown_key_names_valid_ones(self, tmp_path):
        with pytest.raises(ConfigError, match="learning_rate"):
            load_pipeline_config(write(tmp_path, MINIMAL + "[train]\nlr = 0.1\n"))

    def test_missing_dataset_section(self, tmp_path):
        with pytest.raises(ConfigError, match=r"\[dataset\]"):
            load_pipeline_config(write(tmp_path, "[train]\nseed = 1\n"))

    def test_dataset_needs_id_and_root(self, tmp_path):
        with pytest.raises(ConfigError, match="id and root"):
            load_pipeline_config(write(tmp_path, "[dataset]\nid = pcam\n"))

    def test_bad_value_reports_section_and_key(self, tmp_path):
        with pytest.raises(ConfigError, match=r"\[train\] batch_size"):
            load_pipeline_config(write(tmp_path, MINIMAL + "[train]\nbatch_size = many\n"))

    def test_bad_magnifications(self, tmp_path):
        bad = MINIMAL.replace("pcam", "breakhis") + "\n"
        with pytest.raises(ConfigError, match="magnifications"):
            load_pipeline_config(
                write(tmp_path, "[dataset]\nid = breakhis\nroot = /d\nmagnifications = forty\n")
            )

    def test_semantic_errors_become_config_errors(self, tmp_path):
        with pytest.raises(ConfigError, match=r"\[stain\]"):
            load_pipeline_config(write(tmp_path, MINIMAL + "[stain]\nio_intensity = -4\n"))
        with pytest.raises(ConfigError, match=r"\[augment\]"):
            load_pipeline_config(write(tmp_path, MINIMAL + "[augment]\nzoom_range = 2.0\n"))
        with pytest.raises(ConfigError, match=r"\[train\]"):
            load_pipeline_config(write(tmp_path, MINIMAL + "[train]\nbeta1 = 1.5\n"))

    def test_example_config_loads(self, tmp_path):
        path = tmp_path / "example.ini"
        config.write_example_config(path)
        cfg = load_pipeline_config(path)
        assert cfg.dataset.dataset_id == "pcam"
        assert cfg.train.max_epochs == 200
        assert cfg.out_dir == "runs/demo"

    def test_load_is_deterministic(self, tmp_path):
        path = write(tmp_path, MINIMAL + "[train]\nseed = 2\n")
        assert config_digest(load_pipeline_config(path)) == config_digest(
            load_pipeline_config(path)
        )

    def test_bundled_demo_config_loads(self):
        from conftest import REPO_ROOT

        cfg = load_pipeline_config(REPO_ROOT / "fixture" / "pipeline.ini")
        assert cfg.dataset.dataset_id == "pcam"
        assert set(cfg.features.backbone_ids) == {"stub_a", "stub_b", "stub_c"}
