"""Feature extraction backbones.

Three self-contained "stub" backbones ship with the package: each reads a
single color channel (stub_a red, stub_b green, stub_c blue), summarizes
it with fixed spatial statistics, and projects through a frozen seeded
matrix. They need no downloaded weights, are sensitive to flips, and see
disjoint channels, so fusing them genuinely adds information.

Adapters for the large pretrained CNN bodies (vgg19, mobilenetv2,
densenet201) live in .pretrained and import torch lazily; install the
"deep" extra to use them.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import fusion, preprocess

INPUT_SIZE = 224
HEAD_DIM = 256
STUB_IDS = ("stub_a", "stub_b", "stub_c")
PRETRAINED_IDS = ("vgg19", "mobilenetv2", "densenet201")
BACKBONE_IDS = PRETRAINED_IDS + STUB_IDS
BODY_DIMS = {
    "vgg19": 512,
    "mobilenetv2": 1280,
    "densenet201": 1920,
    "stub_a": 64,
    "stub_b": 64,
    "stub_c": 64,
}
TAPS = ("pooled", "head")

_STUB_CHANNEL = {"stub_a": 0, "stub_b": 1, "stub_c": 2}
_STUB_PROJECTION_SEED = {"stub_a": 101, "stub_b": 211, "stub_c": 307}
_STUB_STATS = 16
_HIST_BINS = 8


class BackboneError(Exception):
    """A backbone cannot be built or used as requested."""


class WeightsError(BackboneError):
    """Requested weights are missing or unloadable."""


@dataclass(frozen=True)
class BackboneDescriptor:
    backbone_id: str
    body_dim: int
    head_dim: int = HEAD_DIM
    input_size: int = INPUT_SIZE
    weights_source: str = "builtin"


@dataclass(frozen=True)
class FeatureVector:
    """One sample's features from one backbone. sample_ref ties the vector
    back to whatever ordered collection the caller extracted from."""

    values: np.ndarray
    backbone_id: str
    sample_ref: int

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 1 or v.size == 0:
            raise ValueError(f"values must be a non-empty 1-d vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite features from {self.backbone_id!r}")
        object.__setattr__(self, "values", v)


def _check_input(img: preprocess.ImageTensor, backbone_id: str) -> None:
    if img.value_range != "unit" or img.color_space != "rgb":
        raise ValueError(f"{backbone_id} expects unit-range RGB input; resize and min-max first")
    if img.pixels.shape[:2] != (INPUT_SIZE, INPUT_SIZE):
        raise ValueError(
            f"{backbone_id} expects {INPUT_SIZE}x{INPUT_SIZE} input, got {img.pixels.shape[:2]}"
        )


def _channel_stats(plane: np.ndarray) -> np.ndarray:
    """Sixteen fixed statistics of one channel plane.

    Histogram and moments capture intensity; half-plane gradient means and
    the intensity centroid capture coarse layout, which is what makes the
    stubs react to flips the way a convolutional body would.
    """
    h, w = plane.shape
    hist, _ = np.histogram(plane, bins=_HIST_BINS, range=(0.0, 1.0))
    hist = hist / plane.size
    gx = np.abs(np.diff(plane, axis=1))
    gy = np.abs(np.diff(plane, axis=0))
    half_w = w // 2
    half_h = h // 2
    mass = plane.sum()
    if mass > 0:
        ys, xs = np.mgrid[0:h, 0:w]
        cx = float((plane * xs).sum() / (mass * (w - 1)))
        cy = float((plane * ys).sum() / (mass * (h - 1)))
    else:
        cx = cy = 0.5
    return np.concatenate(
        [
            hist,
            [plane.mean(), plane.std()],
            [gx[:, :half_w].mean(), gx[:, half_w:].mean()],
            [gy[:half_h, :].mean(), gy[half_h:, :].mean()],
            [cx, cy],
        ]
    )


class StubBackbone:
    """Single-channel statistics body with an optional trainable head."""

    def __init__(self, backbone_id: str, head: dict[str, np.ndarray] | None = None):
        if backbone_id not in STUB_IDS:
            raise ValueError(f"not a stub backbone: {backbone_id!r}")
        self.backbone_id = backbone_id
        self._channel = _STUB_CHANNEL[backbone_id]
        rng = np.random.default_rng(_STUB_PROJECTION_SEED[backbone_id])
        # Frozen body: a seeded Gaussian projection of the 16 statistics,
        # squashed by tanh. Never trained, so two loads are bit-identical.
        self._projection = rng.normal(0.0, 1.0 / np.sqrt(_STUB_STATS), size=(_STUB_STATS, BODY_DIMS[backbone_id]))
        self._head = head

    @property
    def descriptor(self) -> BackboneDescriptor:
        return BackboneDescriptor(self.backbone_id, BODY_DIMS[self.backbone_id])

    @property
    def has_head(self) -> bool:
        return self._head is not None

    def body_parameters(self) -> np.ndarray:
        return self._projection

    def body_features(self, images: Sequence[preprocess.ImageTensor]) -> np.ndarray:
        rows = []
        for img in images:
            _check_input(img, self.backbone_id)
            stats = _channel_stats(img.pixels[..., self._channel])
            rows.append(np.tanh(stats @ self._projection))
        return np.asarray(rows, dtype=np.float32)

    def replace_head(self, num_classes: int = 2, seed: int = 0) -> "StubBackbone":
        if num_classes != 2:
            raise ValueError(f"head is binary; num_classes must be 2, got {num_classes}")
        rng = np.random.default_rng(seed)
        head = fusion.init_params(BODY_DIMS[self.backbone_id], HEAD_DIM, rng)
        out = StubBackbone(self.backbone_id, head)
        out._projection = self._projection  # body untouched by head swaps
        return out

    def fine_tune(
        self,
        images: Sequence[preprocess.ImageTensor],
        labels: Sequence[int],
        cfg: fusion.TrainConfig,
    ) -> tuple["StubBackbone", tuple[fusion.EpochStats, ...]]:
        feats = self.body_features(images).astype(np.float64)
        params, history = fusion.train_mlp(feats, np.asarray(labels), cfg)
        out = StubBackbone(self.backbone_id, params)
        out._projection = self._projection
        return out, history

    def extract(
        self,
        images: Sequence[preprocess.ImageTensor],
        tap: str = "pooled",
        sample_refs: Sequence[int] | None = None,
    ) -> list[FeatureVector]:
        if tap not in TAPS:
            raise ValueError(f"tap must be one of {TAPS}, got {tap!r}")
        body = self.body_features(images)
        if tap == "head":
            if self._head is None:
                raise BackboneError(
                    f"{self.backbone_id} has no head; call replace_head or fine_tune first"
                )
            body = fusion.hidden_features(self._head, body).astype(np.float32)
        refs = list(range(len(images))) if sample_refs is None else [int(r) for r in sample_refs]
        if len(refs) != len(images):
            raise ValueError(f"got {len(refs)} sample_refs for {len(images)} images")
        return [FeatureVector(body[i], self.backbone_id, refs[i]) for i in range(len(images))]


def load_backbone(backbone_id: str, weights: str = "default", weights_path: str | Path | None = None):
    """Construct a backbone by id.

    Stubs are fully deterministic and take no weights. Pretrained ids
    accept weights "imagenet", "file" (with weights_path), or "random";
    they require the optional torch dependency, which is only imported
    here so stub-only installs never touch it.
    """
    if backbone_id in STUB_IDS:
        if weights not in ("default", "builtin") or weights_path is not None:
            raise ValueError(f"stub backbone {backbone_id} takes no weights")
        return StubBackbone(backbone_id)
    if backbone_id not in PRETRAINED_IDS:
        raise ValueError(f"unknown backbone {backbone_id!r}; expected one of {BACKBONE_IDS}")
    if weights == "default":
        weights = "imagenet"
    if weights not in ("imagenet", "file", "random"):
        raise ValueError(f"weights must be imagenet/file/random, got {weights!r}")
    if weights == "file":
        if weights_path is None:
            raise WeightsError(f"{backbone_id}: weights='file' needs weights_path")
        if not Path(weights_path).is_file():
            raise WeightsError(f"{backbone_id}: weights file not found: {weights_path}")
    try:
        pretrained = importlib.import_module(".pretrained", __package__)
    except ImportError as exc:
        raise BackboneError(
            f"{backbone_id} needs torch/torchvision; install the 'deep' extra"
        ) from exc
    return pretrained.PretrainedBackbone(backbone_id, weights, weights_path)


def replace_head(backbone, num_classes: int = 2, seed: int = 0):
    return backbone.replace_head(num_classes=num_classes, seed=seed)


def fine_tune(backbone, images, labels, cfg: fusion.TrainConfig):
    return backbone.fine_tune(images, labels, cfg)


def extract_features(backbone, images, tap: str = "pooled", sample_refs=None) -> list[FeatureVector]:
    return backbone.extract(images, tap=tap, sample_refs=sample_refs)
