"""On-disk feature matrix format.

Layout: 4-byte magic "HFV1", then two little-endian uint32 (sample count,
feature dim), then count*dim float32 values row-major, then count uint8
binary labels. Row order is the sample order of whatever produced the
file; the format itself carries no sample identifiers.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HFV1"
_HEADER = struct.Struct("<4sII")


def save_features(path: str | Path, matrix: np.ndarray, labels: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    y = np.asarray(labels)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ValueError(f"feature matrix must be non-empty 2-d, got shape {m.shape}")
    if y.shape != (m.shape[0],):
        raise ValueError(f"labels shape {y.shape} does not match {m.shape[0]} rows")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite feature values")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())
        fh.write(y.astype(np.uint8).tobytes())


def load_features(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: file too short for header")
    magic, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic {magic!r})")
    expected = _HEADER.size + count * dim * 4 + count
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {count}x{dim}, got {len(raw)}")
    body = _HEADER.size
    matrix = (
        np.frombuffer(raw[body : body + count * dim * 4], dtype="<f4")
        .reshape(count, dim)
        .copy()
    )
    labels = np.frombuffer(raw[body + count * dim * 4 :], dtype=np.uint8).copy()
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError(f"{path}: labels must be 0 or 1")
    return matrix, labels
