"""Shared fixtures: synthetic image trees in the four dataset layouts."""

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from histofuse import synthdata

REPO_ROOT = Path(__file__).resolve().parent.parent
BUNDLED_FIXTURE = REPO_ROOT / "fixture" / "images"


def tiny_png(path: Path, seed: int = 0, side: int = 8) -> None:
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(side, side, 3), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def make_breakhis_tree(root: Path, patients_per_class: int = 4, mags=(40, 100)) -> Path:
    """BreakHis-style filenames; each patient appears at every magnification."""
    n = 0
    for cls, subtype in (("B", "A"), ("M", "DC")):
        for p in range(patients_per_class):
            patient = f"{10 + p}-{1000 + p}{cls}"
            for mag in mags:
                for seq in (1, 2):
                    name = f"SOB_{cls}_{subtype}-{patient}-{mag}-{seq:03d}.png"
                    tiny_png(root / name, seed=n)
                    n += 1
    return root


def make_class_tree(root: Path, counts: dict[str, int], ext: str = ".png", seed: int = 0) -> Path:
    n = seed
    for cls, count in counts.items():
        for i in range(count):
            tiny_png(root / cls / f"img_{i:03d}{ext}", seed=n)
            n += 1
    return root


@pytest.fixture(scope="session")
def bundled_fixture() -> Path:
    assert BUNDLED_FIXTURE.is_dir(), "bundled fixture missing; run: histofuse make-fixture --out fixture/images"
    return BUNDLED_FIXTURE


@pytest.fixture()
def small_tree(tmp_path) -> Path:
    """Six-per-class synthetic tree in the pcam layout, real renderable images."""
    return synthdata.make_fixture_tree(tmp_path / "images", n_per_class=6, seed=11, side=64)
