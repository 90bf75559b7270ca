"""Typed pipeline configuration and its INI file form.

One file describes a whole run: dataset, stain normalization, augmentation,
feature extraction, training, output location. Loading validates every
section and key against a closed vocabulary so typos fail fast, before any
stage runs.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .augment import AugmentConfig, parse_bool
from .backbones import BACKBONE_IDS, TAPS
from .datasets import DATASET_IDS
from .fusion import TrainConfig
from .preprocess import MacenkoParams


class ConfigError(Exception):
    """A config file or value failed validation."""


@dataclass(frozen=True)
class DatasetConfig:
    dataset_id: str
    root: str
    train_fraction: float = 0.8
    split_seed: int = 7
    magnifications: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.dataset_id not in DATASET_IDS:
            raise ConfigError(f"dataset.id must be one of {DATASET_IDS}, got {self.dataset_id!r}")
        if not self.root:
            raise ConfigError("dataset.root must be set")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"dataset.train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.magnifications is not None and self.dataset_id != "breakhis":
            raise ConfigError("dataset.magnifications only applies to breakhis")


@dataclass(frozen=True)
class StainConfig:
    enabled: bool = True
    reference: str | None = None
    params: MacenkoParams = MacenkoParams()
    strict: bool = False


@dataclass(frozen=True)
class FeatureConfig:
    backbone_ids: tuple[str, ...] = ("stub_a", "stub_b", "stub_c")
    tap: str = "pooled"
    weights: str = "default"
    weights_path: str | None = None

    def __post_init__(self) -> None:
        if not self.backbone_ids:
            raise ConfigError("features.backbones must list at least one backbone")
        if len(set(self.backbone_ids)) != len(self.backbone_ids):
            raise ConfigError(f"duplicate backbone ids: {self.backbone_ids}")
        unknown = [b for b in self.backbone_ids if b not in BACKBONE_IDS]
        if unknown:
            raise ConfigError(f"unknown backbones {unknown}; expected subset of {BACKBONE_IDS}")
        if self.tap not in TAPS:
            raise ConfigError(f"features.tap must be one of {TAPS}, got {self.tap!r}")
        if self.weights not in ("default", "imagenet", "file", "random"):
            raise ConfigError(f"features.weights must be default/imagenet/file/random, got {self.weights!r}")


@dataclass(frozen=True)
class PipelineConfig:
    dataset: DatasetConfig
    stain: StainConfig = StainConfig()
    augment: AugmentConfig = AugmentConfig()
    augment_enabled: bool = True
    features: FeatureConfig = FeatureConfig()
    train: TrainConfig = TrainConfig()
    out_dir: str = "runs/out"

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Override every stage seed at once (the CLI --seed switch)."""
        return dataclasses.replace(
            self,
            dataset=dataclasses.replace(self.dataset, split_seed=seed),
            augment=dataclasses.replace(self.augment, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )


def config_digest(cfg: PipelineConfig) -> str:
    """Stable content hash of a config, for cache keys and provenance."""
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


_SECTIONS = {
    "dataset": {"id", "root", "train_fraction", "split_seed", "magnifications"},
    "stain": {
        "enabled",
        "reference",
        "od_threshold",
        "angle_percentile",
        "concentration_percentile",
        "io_intensity",
        "min_tissue_pixels",
        "strict",
    },
    "augment": {
        "enabled",
        "horizontal_flip",
        "vertical_flip",
        "contrast_enhancement",
        "zoom_range",
        "shear_range",
        "rotation_range",
        "fill_mode",
        "copies_per_image",
        "seed",
    },
    "features": {"backbones", "tap", "weights", "weights_path"},
    "train": {
        "learning_rate",
        "beta1",
        "beta2",
        "epsilon",
        "batch_size",
        "max_epochs",
        "hidden_units",
        "dropout",
        "seed",
    },
    "run": {"out_dir"},
}


class _Section:
    """Typed access to one INI section with config-error context."""

    def __init__(self, name: str, values: dict[str, str]):
        self.name = name
        self.values = values

    def _convert(self, key: str, conv, default):
        if key not in self.values:
            return default
        raw = self.values[key]
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{self.name}] {key}: bad value {raw!r}: {exc}") from exc

    def str_(self, key: str, default=None):
        return self.values.get(key, default)

    def bool_(self, key: str, default: bool) -> bool:
        return self._convert(key, parse_bool, default)

    def int_(self, key: str, default: int) -> int:
        return self._convert(key, int, default)

    def float_(self, key: str, default: float) -> float:
        return self._convert(key, float, default)


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    """Parse and validate an INI pipeline config."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected {sorted(_SECTIONS)}")
        for key in parser[section]:
            if key not in _SECTIONS[section]:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}]; valid: {sorted(_SECTIONS[section])}"
                )
    if "dataset" not in parser:
        raise ConfigError("config needs a [dataset] section with id and root")

    ds = _Section("dataset", dict(parser["dataset"]))
    if not ds.str_("id") or not ds.str_("root"):
        raise ConfigError("[dataset] must set both id and root")
    mags_raw = ds.str_("magnifications")
    mags: tuple[int, ...] | None = None
    if mags_raw:
        try:
            mags = tuple(int(m.strip()) for m in mags_raw.split(",") if m.strip())
        except ValueError as exc:
            raise ConfigError(f"[dataset] magnifications: bad value {mags_raw!r}") from exc
    try:
        dataset = DatasetConfig(
            dataset_id=ds.str_("id"),
            root=ds.str_("root"),
            train_fraction=ds.float_("train_fraction", 0.8),
            split_seed=ds.int_("split_seed", 7),
            magnifications=mags,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    st = _Section("stain", dict(parser["stain"]) if "stain" in parser else {})
    try:
        stain = StainConfig(
            enabled=st.bool_("enabled", True),
            reference=st.str_("reference") or None,
            params=MacenkoParams(
                od_threshold=st.float_("od_threshold", 0.15),
                angle_percentile=st.float_("angle_percentile", 1.0),
                concentration_percentile=st.float_("concentration_percentile", 99.0),
                io_intensity=st.float_("io_intensity", 240.0),
                min_tissue_pixels=st.int_("min_tissue_pixels", 100),
            ),
            strict=st.bool_("strict", False),
        )
    except ValueError as exc:
        raise ConfigError(f"[stain] {exc}") from exc

    au = _Section("augment", dict(parser["augment"]) if "augment" in parser else {})
    try:
        aug = AugmentConfig(
            horizontal_flip=au.bool_("horizontal_flip", True),
            vertical_flip=au.bool_("vertical_flip", True),
            contrast_enhancement=au.bool_("contrast_enhancement", True),
            zoom_range=au.float_("zoom_range", 0.2),
            shear_range=au.float_("shear_range", 0.2),
            rotation_range=au.float_("rotation_range", 90.0),
            fill_mode=au.str_("fill_mode", "nearest"),
            copies_per_image=au.int_("copies_per_image", 3),
            seed=au.int_("seed", 0),
        )
    except ValueError as exc:
        raise ConfigError(f"[augment] {exc}") from exc
    augment_enabled = au.bool_("enabled", True)

    fe = _Section("features", dict(parser["features"]) if "features" in parser else {})
    backbones_raw = fe.str_("backbones", "stub_a,stub_b,stub_c")
    backbone_ids = tuple(b.strip() for b in backbones_raw.split(",") if b.strip())
    features = FeatureConfig(
        backbone_ids=backbone_ids,
        tap=fe.str_("tap", "pooled"),
        weights=fe.str_("weights", "default"),
        weights_path=fe.str_("weights_path") or None,
    )

    tr = _Section("train", dict(parser["train"]) if "train" in parser else {})
    try:
        train = TrainConfig(
            learning_rate=tr.float_("learning_rate", 1e-4),
            beta1=tr.float_("beta1", 0.6),
            beta2=tr.float_("beta2", 0.8),
            epsilon=tr.float_("epsilon", 1e-8),
            batch_size=tr.int_("batch_size", 32),
            max_epochs=tr.int_("max_epochs", 200),
            hidden_units=tr.int_("hidden_units", 256),
            dropout=tr.float_("dropout", 0.5),
            seed=tr.int_("seed", 0),
        )
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from exc

    rn = _Section("run", dict(parser["run"]) if "run" in parser else {})
    return PipelineConfig(
        dataset=dataset,
        stain=stain,
        augment=aug,
        augment_enabled=augment_enabled,
        features=features,
        train=train,
        out_dir=rn.str_("out_dir", "runs/out"),
    )


EXAMPLE_CONFIG = """\
[dataset]
id = pcam
root = fixture/images
train_fraction = 0.8
split_seed = 7

[stain]
enabled = true
# reference = path/to/reference.png   # default: first training image
strict = false

[augment]
enabled = true
horizontal_flip = true
vertical_flip = true
contrast_enhancement = true
zoom_range = 0.2
shear_range = 0.2
rotation_range = 90.0
fill_mode = nearest
copies_per_image = 3
seed = 0

[features]
backbones = stub_a,stub_b,stub_c
tap = pooled

[train]
learning_rate = 0.0001
beta1 = 0.6
beta2 = 0.8
batch_size = 32
max_epochs = 200
hidden_units = 256
dropout = 0.5
seed = 0

[run]
out_dir = runs/demo
"""


def write_example_config(path: str | Path) -> None:
    Path(path).write_text(EXAMPLE_CONFIG, encoding="utf-8")
