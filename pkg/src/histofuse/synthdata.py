"""Synthetic two-stain image generators.

Used by the bundled demo fixture and by tests that need images with a
known ground-truth stain decomposition. Rendering goes through the same
OD inverse as the real pipeline, so a generated image's stain model is
recoverable up to quantization.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import preprocess


def _unit_columns(c1, c2) -> np.ndarray:
    m = np.column_stack([np.asarray(c1, dtype=np.float64), np.asarray(c2, dtype=np.float64)])
    m = m / np.linalg.norm(m, axis=0)
    # Blue-heavy column first, matching the fitted-model convention.
    if m[2, 0] < m[2, 1]:
        m = m[:, ::-1]
    return m


# A well-separated stain pair (angle ~43 degrees between columns, every
# component well above the 0.15 tissue threshold at moderate
# concentrations). Estimation from renders of this pair is numerically
# benign, unlike near-parallel stain pairs.
WIDE_STAINS = _unit_columns([0.30, 0.55, 0.85], [0.85, 0.55, 0.30])

# Classic hematoxylin/eosin-ish directions, for fixtures that should look
# plausibly histological.
HE_LIKE_STAINS = _unit_columns([0.65, 0.70, 0.29], [0.07, 0.99, 0.11])


def render_two_stain(
    concentrations: np.ndarray,
    stains: np.ndarray = WIDE_STAINS,
    io_intensity: float = preprocess.DEFAULT_IO,
) -> preprocess.ImageTensor:
    """Render an (H, W, 2) concentration field to an 8-bit RGB image."""
    c = np.asarray(concentrations, dtype=np.float64)
    if c.ndim != 3 or c.shape[2] != 2:
        raise ValueError(f"concentrations must be (H, W, 2), got {c.shape}")
    od = c @ stains.T
    return preprocess.od_inverse(preprocess.ImageTensor(od, "od", "od"), io_intensity)


def make_two_stain_image(
    rng: np.random.Generator,
    side: int = 144,
    stains: np.ndarray = WIDE_STAINS,
    pure_range: tuple[float, float] = (0.6, 0.9),
    mix_range: tuple[float, float] = (0.15, 0.55),
) -> tuple[preprocess.ImageTensor, np.ndarray]:
    """Three horizontal bands: pure stain one, pure stain two, mixed.

    Returns the image and its exact concentration field. The pure bands
    pin the extreme stain directions; the mixed band exercises the
    unmixing path.
    """
    third = side // 3
    c = np.zeros((side, side, 2))
    c[:third, :, 0] = rng.uniform(*pure_range, size=(third, side))
    c[third : 2 * third, :, 1] = rng.uniform(*pure_range, size=(third, side))
    c[2 * third :, :, :] = rng.uniform(*mix_range, size=(side - 2 * third, side, 2))
    return render_two_stain(c, stains), c


def _smooth_field(rng: np.random.Generator, side: int, cells: int = 4, fine: float = 0.15) -> np.ndarray:
    """Blocky low-frequency noise in [0, 1] with a little fine noise."""
    coarse = np.kron(rng.random((cells, cells)), np.ones((side // cells + 1, side // cells + 1)))
    coarse = coarse[:side, :side]
    return (1.0 - fine) * coarse + fine * rng.random((side, side))


def make_fixture_image(
    rng: np.random.Generator, label: int, side: int = 96
) -> preprocess.ImageTensor:
    """One synthetic tile. Both classes use the same stain concentration
    ranges, so stain normalization cannot erase the class signal; what
    differs is spatial texture. Benign tiles vary smoothly, malignant
    tiles are fine-grained speckle (nuclei-crowding stand-in)."""
    if label == 0:
        t1 = _smooth_field(rng, side, cells=4)
        t2 = _smooth_field(rng, side, cells=5)
    else:
        t1 = rng.random((side, side))
        t2 = rng.random((side, side))
    c1 = 0.30 + 0.45 * t1
    c2 = 0.30 + 0.45 * t2
    return render_two_stain(np.stack([c1, c2], axis=-1))


def make_fixture_tree(
    out_dir: str | Path, n_per_class: int = 30, seed: int = 20240101, side: int = 96
) -> Path:
    """Write a two-folder benign/malignant image tree (pcam layout)."""
    root = Path(out_dir)
    rng = np.random.default_rng(seed)
    for label, name in ((0, "benign"), (1, "malignant")):
        sub = root / name
        sub.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            img = make_fixture_image(rng, label, side)
            preprocess.save_image(img, sub / f"{name}_{i:03d}.png")
    return root


def make_majority_bit_images(
    n: int, seed: int = 0, side: int = preprocess.DEFAULT_SIZE[0]
) -> tuple[list[preprocess.ImageTensor], np.ndarray]:
    """Images whose label is the majority vote of three hidden channel bits.

    Bit i sets channel i's mean level. Any single channel predicts the
    label with accuracy ~0.75 by construction; all three channels together
    determine it exactly. Returned unit-range, ready for the stubs.
    """
    rng = np.random.default_rng(seed)
    images = []
    labels = np.empty(n, dtype=np.int64)
    for k in range(n):
        bits = rng.integers(0, 2, size=3)
        labels[k] = 1 if bits.sum() >= 2 else 0
        planes = []
        for c in range(3):
            base = 0.3 + 0.4 * bits[c]
            planes.append(np.clip(base + rng.normal(0.0, 0.02, size=(side, side)), 0.0, 1.0))
        images.append(preprocess.ImageTensor(np.stack(planes, axis=-1), "unit", "rgb"))
    return images, labels


def make_separable_images(
    n_per_class: int, seed: int = 0, side: int = preprocess.DEFAULT_SIZE[0]
) -> tuple[list[preprocess.ImageTensor], np.ndarray]:
    """Trivially separable set: dim tiles are class 0, bright tiles class 1.

    Every channel separates the classes, so even one stub backbone should
    reach perfect accuracy."""
    rng = np.random.default_rng(seed)
    images = []
    labels = np.empty(2 * n_per_class, dtype=np.int64)
    for k in range(2 * n_per_class):
        label = k % 2
        base = 0.25 if label == 0 else 0.75
        arr = np.clip(base + rng.normal(0.0, 0.03, size=(side, side, 3)), 0.0, 1.0)
        images.append(preprocess.ImageTensor(arr, "unit", "rgb"))
        labels[k] = label
    return images, labels
