"""Seeded offline augmentation for training images.

Sampling and application are separate steps: sample_draw turns (config
seed, draw index) into an explicit AugmentDraw, apply_draw renders it.
Every draw consumes the same number of random values regardless of which
knobs are enabled, so toggling one augmentation never shifts the values
the others see.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np

from . import datasets, preprocess

FILL_MODES = ("nearest",)
_BORDER_FLAGS = {"nearest": cv2.BORDER_REPLICATE}

CONTRAST_LOW = 0.8
CONTRAST_HIGH = 1.2


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation ranges. Defaults match the training recipe: flips and
    contrast on, 0.2 zoom, 0.2 shear, rotations up to 90 degrees, nearest
    fill."""

    horizontal_flip: bool = True
    vertical_flip: bool = True
    contrast_enhancement: bool = True
    zoom_range: float = 0.2
    shear_range: float = 0.2
    rotation_range: float = 90.0
    fill_mode: str = "nearest"
    copies_per_image: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.zoom_range < 1.0:
            raise ValueError(f"zoom_range must be in [0, 1), got {self.zoom_range}")
        if self.shear_range < 0.0:
            raise ValueError(f"shear_range must be >= 0, got {self.shear_range}")
        if not 0.0 <= self.rotation_range <= 180.0:
            raise ValueError(f"rotation_range must be in [0, 180], got {self.rotation_range}")
        if self.fill_mode not in FILL_MODES:
            raise ValueError(f"fill_mode must be one of {FILL_MODES}, got {self.fill_mode!r}")
        if self.copies_per_image < 1:
            raise ValueError(f"copies_per_image must be >= 1, got {self.copies_per_image}")


@dataclass(frozen=True)
class AugmentDraw:
    """One concrete augmentation: flips, rotation (degrees), shear
    (radians), isotropic zoom factor, and contrast factor (None when
    contrast is disabled)."""

    hflip: bool
    vflip: bool
    rotation_deg: float
    shear_rad: float
    zoom: float
    contrast: float | None


def sample_draw(cfg: AugmentConfig, draw_index: int | tuple[int, ...]) -> AugmentDraw:
    """Deterministically sample the augmentation for one (seed, index) pair.

    The six underlying draws happen in a fixed order even for disabled
    knobs; disabling only changes how a draw is interpreted.
    """
    index = (draw_index,) if isinstance(draw_index, int) else tuple(draw_index)
    rng = np.random.default_rng((cfg.seed,) + index)
    u_h = rng.random()
    u_v = rng.random()
    rotation = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    shear = rng.uniform(-cfg.shear_range, cfg.shear_range)
    zoom = rng.uniform(1.0 - cfg.zoom_range, 1.0 + cfg.zoom_range)
    contrast = rng.uniform(CONTRAST_LOW, CONTRAST_HIGH)
    return AugmentDraw(
        hflip=cfg.horizontal_flip and u_h < 0.5,
        vflip=cfg.vertical_flip and u_v < 0.5,
        rotation_deg=rotation,
        shear_rad=shear,
        zoom=zoom,
        contrast=contrast if cfg.contrast_enhancement else None,
    )


def _affine_matrix(draw: AugmentDraw, shape: tuple[int, int]) -> np.ndarray | None:
    """Output-to-input coordinate map combining rotation, shear and zoom,
    centered on the pixel grid. None when all three are identity, so
    flip-only draws stay bit-exact array ops."""
    if draw.rotation_deg == 0.0 and draw.shear_rad == 0.0 and draw.zoom == 1.0:
        return None
    theta = np.deg2rad(draw.rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shear = np.array([[1.0, -np.sin(draw.shear_rad)], [0.0, np.cos(draw.shear_rad)]])
    zoom = np.diag([draw.zoom, draw.zoom])
    a = rot @ shear @ zoom
    h, w = shape
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    offset = center - a @ center
    return np.column_stack([a, offset])


def apply_draw(img: preprocess.ImageTensor, draw: AugmentDraw, fill_mode: str = "nearest") -> preprocess.ImageTensor:
    """Render a sampled augmentation onto an 8-bit RGB image."""
    if img.value_range != "uint8" or img.color_space != "rgb":
        raise ValueError("augmentation expects an 8-bit RGB image")
    if fill_mode not in FILL_MODES:
        raise ValueError(f"fill_mode must be one of {FILL_MODES}, got {fill_mode!r}")
    out = img.pixels
    if draw.hflip:
        out = np.fliplr(out)
    if draw.vflip:
        out = np.flipud(out)
    matrix = _affine_matrix(draw, out.shape[:2])
    if matrix is not None:
        out = cv2.warpAffine(
            np.ascontiguousarray(out),
            matrix,
            (out.shape[1], out.shape[0]),
            flags=cv2.INTER_CUBIC | cv2.WARP_INVERSE_MAP,
            borderMode=_BORDER_FLAGS[fill_mode],
        )
    if draw.contrast is not None:
        # Scale around the image's own mean so overall brightness holds.
        arr = out.astype(np.float64)
        mean = arr.mean()
        arr = draw.contrast * (arr - mean) + mean
        out = np.rint(np.clip(arr, 0.0, 255.0)).astype(np.uint8)
    elif out is img.pixels:
        out = out.copy()
    else:
        out = np.ascontiguousarray(out)
    return preprocess.ImageTensor(out, "uint8", "rgb")


def augment_one(
    img: preprocess.ImageTensor, cfg: AugmentConfig, draw_index: int | tuple[int, ...]
) -> preprocess.ImageTensor:
    return apply_draw(img, sample_draw(cfg, draw_index), cfg.fill_mode)


def _check_writable(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    probe = out_dir / ".write-probe"
    try:
        probe.touch()
    except OSError as exc:
        raise OSError(f"output directory not writable: {out_dir}") from exc
    os.unlink(probe)


def augment_manifest(
    manifest: datasets.DatasetManifest, cfg: AugmentConfig, out_dir: str | Path
) -> datasets.DatasetManifest:
    """Write augmented copies of every train image and return the grown
    manifest: originals first, then copies in (record, copy) order.

    Draw index is (position among train records, copy number), so the
    rendered copies depend only on the manifest content and config, not on
    filesystem enumeration order.
    """
    train = manifest.train_records
    if not train:
        raise ValueError("manifest has no train split; split before augmenting")
    out = Path(out_dir)
    _check_writable(out)

    new_records: list[datasets.SampleRecord] = []
    for i, record in enumerate(train):
        img = preprocess.load_image(record.image_path)
        stem = Path(record.image_path).stem
        for k in range(cfg.copies_per_image):
            rendered = augment_one(img, cfg, (i, k))
            dest = out / f"{i:05d}-{k:02d}-{stem}.png"
            preprocess.save_image(rendered, dest)
            new_records.append(replace(record, image_path=str(dest)))
    return datasets.DatasetManifest(manifest.records + tuple(new_records), seed=manifest.seed)


_BOOL_KEYS = ("horizontal_flip", "vertical_flip", "contrast_enhancement")
_FLOAT_KEYS = ("zoom_range", "shear_range", "rotation_range")
_INT_KEYS = ("copies_per_image", "seed")
_STR_KEYS = ("fill_mode",)
_ALL_KEYS = _BOOL_KEYS + _FLOAT_KEYS + _INT_KEYS + _STR_KEYS

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def load_augment_config(path: str | Path) -> AugmentConfig:
    """Read a flat key=value config (hash comments allowed). Unknown keys
    are rejected; missing keys take the defaults."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _ALL_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}; valid keys: {sorted(_ALL_KEYS)}")
        if key in values:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        try:
            if key in _BOOL_KEYS:
                values[key] = parse_bool(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            elif key in _INT_KEYS:
                values[key] = int(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad value for {key!r}: {val!r}") from exc
    return AugmentConfig(**values)
