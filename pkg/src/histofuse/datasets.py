"""Dataset ingestion: four folder layouts into one labeled manifest.

Supported sources: BreakHis (labels parsed from filenames), the ICIAR
two-hundred-case challenge layout, the Bioimaging four-class layout
(with or without a published train/test directory pair), and PatchCamelyon
patch folders. Everything downstream consumes only the manifest.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import re
import warnings
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

DATASET_IDS = ("breakhis", "iciar", "bioimaging", "pcam")
MAGNIFICATIONS = (40, 100, 200, 400)
SPLITS = ("", "train", "test")

MANIFEST_COLUMNS = (
    "image_path",
    "dataset_id",
    "raw_class",
    "binary_label",
    "patient_id",
    "magnification",
    "split",
)

_IMAGE_EXTS = (".png", ".tif", ".tiff", ".jpg", ".jpeg")

# SOB_B_A-14-22549AB-40-001.png: procedure, class letter, subtype,
# patient block, magnification, sequence.
_BREAKHIS_STEM = re.compile(
    r"^[A-Z]+_(?P<cls>[BM])_(?P<subtype>[A-Z]+)-(?P<patient>.+)-(?P<mag>40|100|200|400)-(?P<seq>\d+)$"
)

# Canonical class vocabulary per dataset, after lowercasing and stripping
# separators. Four-class sources fold to binary: normal/benign are benign,
# in-situ/invasive are malignant.
_CLASS_TABLES: dict[str, dict[str, int]] = {
    "breakhis": {"b": 0, "m": 1},
    "iciar": {"normal": 0, "benign": 0, "insitu": 1, "invasive": 1},
    "bioimaging": {"normal": 0, "benign": 0, "insitu": 1, "invasive": 1},
    "pcam": {"benign": 0, "malignant": 1},
}


class BinaryLabel(IntEnum):
    BENIGN = 0
    MALIGNANT = 1


class IngestError(Exception):
    """A dataset directory could not be turned into a manifest."""


class SplitError(Exception):
    """Stratified splitting is impossible for this manifest."""


def canonical_class(name: str) -> str:
    return re.sub(r"[\s_\-]+", "", name.strip().lower())


def map_to_binary(raw_class: str, dataset_id: str | None = None) -> BinaryLabel:
    """Map a dataset's native class string to the benign/malignant label."""
    canon = canonical_class(raw_class)
    if dataset_id is not None:
        if dataset_id not in _CLASS_TABLES:
            raise ValueError(f"unknown dataset_id {dataset_id!r}; expected one of {DATASET_IDS}")
        table = _CLASS_TABLES[dataset_id]
        if canon not in table:
            raise ValueError(
                f"unknown class {raw_class!r} for dataset {dataset_id!r}; "
                f"expected one of {sorted(table)}"
            )
        return BinaryLabel(table[canon])
    for table in _CLASS_TABLES.values():
        if canon in table:
            return BinaryLabel(table[canon])
    known = sorted({c for t in _CLASS_TABLES.values() for c in t})
    raise ValueError(f"unknown class {raw_class!r}; expected one of {known}")


@dataclass(frozen=True)
class SampleRecord:
    """One image: where it lives, what it is, and which split owns it."""

    image_path: str
    dataset_id: str
    raw_class: str
    binary_label: BinaryLabel
    patient_id: str | None = None
    magnification: int | None = None
    split: str = ""

    def __post_init__(self) -> None:
        if not self.image_path:
            raise ValueError("image_path must be non-empty")
        if self.dataset_id not in DATASET_IDS:
            raise ValueError(f"unknown dataset_id {self.dataset_id!r}; expected one of {DATASET_IDS}")
        if not self.raw_class:
            raise ValueError("raw_class must be non-empty")
        object.__setattr__(self, "binary_label", BinaryLabel(self.binary_label))
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.dataset_id == "breakhis":
            if not self.patient_id:
                raise ValueError(f"breakhis record {self.image_path} needs a patient_id")
            if self.magnification not in MAGNIFICATIONS:
                raise ValueError(
                    f"breakhis record {self.image_path} needs magnification in {MAGNIFICATIONS}, "
                    f"got {self.magnification}"
                )
        elif self.magnification is not None:
            raise ValueError(f"magnification only applies to breakhis, got {self.magnification}")


@dataclass(frozen=True)
class DatasetManifest:
    """An ordered, validated collection of sample records.

    Paths are unique. If any record is assigned to the train split, both
    binary classes must appear there; a one-class training set is never
    representable.
    """

    records: tuple[SampleRecord, ...]
    seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[str] = set()
        for r in self.records:
            if r.image_path in seen:
                raise ValueError(f"duplicate image_path in manifest: {r.image_path}")
            seen.add(r.image_path)
        train_labels = {r.binary_label for r in self.records if r.split == "train"}
        if train_labels and train_labels != {BinaryLabel.BENIGN, BinaryLabel.MALIGNANT}:
            raise ValueError("train split must contain both binary classes")

    @property
    def train_records(self) -> tuple[SampleRecord, ...]:
        return tuple(r for r in self.records if r.split == "train")

    @property
    def test_records(self) -> tuple[SampleRecord, ...]:
        return tuple(r for r in self.records if r.split == "test")

    def dataset_ids(self) -> set[str]:
        return {r.dataset_id for r in self.records}


def parse_breakhis_stem(stem: str) -> dict[str, str] | None:
    """Split a BreakHis filename stem into its fields, or None if malformed."""
    m = _BREAKHIS_STEM.match(stem)
    if m is None:
        return None
    return m.groupdict()


def _iter_images(folder: Path) -> list[Path]:
    out = [p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in _IMAGE_EXTS]
    return sorted(out)


def _scan_class_folders(root: Path, dataset_id: str, split: str = "") -> list[SampleRecord]:
    table = _CLASS_TABLES[dataset_id]
    records: list[SampleRecord] = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        canon = canonical_class(sub.name)
        if canon not in table:
            warnings.warn(f"ignoring unrecognized class folder {sub}")
            continue
        for img in _iter_images(sub):
            records.append(
                SampleRecord(
                    image_path=str(img),
                    dataset_id=dataset_id,
                    raw_class=sub.name,
                    binary_label=BinaryLabel(table[canon]),
                    split=split,
                )
            )
    return records


def _scan_breakhis(root: Path) -> list[SampleRecord]:
    records: list[SampleRecord] = []
    skipped = 0
    for img in sorted(root.rglob("*.png")):
        fields = parse_breakhis_stem(img.stem)
        if fields is None:
            warnings.warn(f"skipping unparsable BreakHis filename: {img.name}")
            skipped += 1
            continue
        records.append(
            SampleRecord(
                image_path=str(img),
                dataset_id="breakhis",
                raw_class=fields["cls"],
                binary_label=map_to_binary(fields["cls"], "breakhis"),
                patient_id=fields["patient"],
                magnification=int(fields["mag"]),
            )
        )
    if skipped:
        warnings.warn(f"skipped {skipped} unparsable BreakHis filenames under {root}")
    return records


def ingest(dataset_id: str, root: str | Path) -> DatasetManifest:
    """Scan a dataset directory into a manifest, sorted by image path.

    Bioimaging roots holding train/ and test/ subdirectories keep that
    published split; everything else comes back unassigned.
    """
    if dataset_id not in DATASET_IDS:
        raise ValueError(f"unknown dataset_id {dataset_id!r}; expected one of {DATASET_IDS}")
    rootp = Path(root)
    if not rootp.is_dir():
        raise FileNotFoundError(f"dataset root is not a directory: {rootp}")

    if dataset_id == "breakhis":
        records = _scan_breakhis(rootp)
    elif dataset_id == "bioimaging" and (rootp / "train").is_dir() and (rootp / "test").is_dir():
        records = _scan_class_folders(rootp / "train", dataset_id, split="train")
        records += _scan_class_folders(rootp / "test", dataset_id, split="test")
    else:
        records = _scan_class_folders(rootp, dataset_id)

    if not records:
        raise IngestError(f"no samples found under {rootp}")
    records.sort(key=lambda r: r.image_path)
    return DatasetManifest(tuple(records))


def _group_key(record: SampleRecord) -> str:
    # BreakHis splits at patient granularity so no patient leaks across
    # splits; other sources have no grouping and split per image.
    if record.dataset_id == "breakhis" and record.patient_id:
        return record.patient_id
    return record.image_path


def split(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Assign train/test stratified by binary label, grouped by patient.

    Each class is permuted independently with its own seeded generator and
    cut at round(train_fraction * n_groups), clamped so both splits keep at
    least one group per class. Re-splitting an already split manifest is
    allowed and reassigns everything.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    groups: dict[str, list[SampleRecord]] = {}
    for r in manifest.records:
        groups.setdefault(_group_key(r), []).append(r)

    # A mixed-label patient lands in the stratum of its majority label
    # (ties go malignant) so the whole group still moves as one unit.
    def group_label(members: list[SampleRecord]) -> int:
        pos = sum(int(m.binary_label) for m in members)
        return 1 if pos * 2 >= len(members) else 0

    assignment: dict[str, str] = {}
    for label in (0, 1):
        keys = sorted(k for k, members in groups.items() if group_label(members) == label)
        if len(keys) < 2:
            raise SplitError(
                f"cannot stratify: class {label} has {len(keys)} group(s), need at least 2"
            )
        n_train = int(round(train_fraction * len(keys)))
        n_train = min(max(n_train, 1), len(keys) - 1)
        rng = np.random.default_rng([seed, label])
        order = rng.permutation(len(keys))
        for pos, idx in enumerate(order):
            assignment[keys[idx]] = "train" if pos < n_train else "test"

    new_records = tuple(
        dataclasses.replace(r, split=assignment[_group_key(r)]) for r in manifest.records
    )
    return DatasetManifest(new_records, seed=seed)


def filter_magnification(manifest: DatasetManifest, magnifications: set[int]) -> DatasetManifest:
    """Keep only BreakHis records at the given magnifications."""
    bad = set(magnifications) - set(MAGNIFICATIONS)
    if bad:
        raise ValueError(f"unknown magnifications {sorted(bad)}; expected subset of {MAGNIFICATIONS}")
    kept = tuple(r for r in manifest.records if r.magnification in magnifications)
    if not kept:
        raise ValueError(f"no records left at magnifications {sorted(magnifications)}")
    return DatasetManifest(kept, seed=manifest.seed)


def manifest_csv_bytes(manifest: DatasetManifest) -> bytes:
    """The manifest's canonical byte form: UTF-8 CSV, LF line endings,
    absent optionals as empty strings. Stable across platforms, so it can
    double as cache-key material."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in manifest.records:
        writer.writerow(
            [
                r.image_path,
                r.dataset_id,
                r.raw_class,
                int(r.binary_label),
                r.patient_id or "",
                "" if r.magnification is None else r.magnification,
                r.split,
            ]
        )
    return buf.getvalue().encode("utf-8")


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_bytes(manifest_csv_bytes(manifest))


def read_manifest(path: str | Path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty manifest file") from None
        if tuple(header) != MANIFEST_COLUMNS:
            raise ValueError(
                f"{path}: bad manifest header {header!r}; expected {list(MANIFEST_COLUMNS)}"
            )
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            path_, dsid, raw, label, patient, mag, split_ = row
            records.append(
                SampleRecord(
                    image_path=path_,
                    dataset_id=dsid,
                    raw_class=raw,
                    binary_label=BinaryLabel(int(label)),
                    patient_id=patient or None,
                    magnification=int(mag) if mag else None,
                    split=split_,
                )
            )
    return DatasetManifest(tuple(records))
