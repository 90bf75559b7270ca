"""Classical baselines trained on the same fused features as the MLP head.

One built-in: a deterministic Gini decision tree. Others can be registered
at runtime; the comparison harness looks models up by id.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class _Node:
    prediction: int
    feature: int = -1
    threshold: float = 0.0
    left: "_Node | None" = None
    right: "_Node | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.sum(p * p))


class DecisionTree:
    """Binary CART with axis-aligned midpoint thresholds.

    Deterministic: features are scanned in index order, thresholds in
    ascending order, and a split must strictly beat the incumbent to
    replace it, so ties always resolve to the earliest candidate.
    """

    def __init__(self, max_depth: int = 12, min_samples_leaf: int = 2):
        if max_depth < 1:
            raise ValueError(f"max_depth must be >= 1, got {max_depth}")
        if min_samples_leaf < 1:
            raise ValueError(f"min_samples_leaf must be >= 1, got {min_samples_leaf}")
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self._root: _Node | None = None

    def fit(self, x: np.ndarray, y: np.ndarray) -> "DecisionTree":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"bad shapes: x {x.shape}, y {y.shape}")
        if not np.all(np.isin(y, (0, 1))):
            raise ValueError("labels must be 0 or 1")
        self._root = self._build(x, y, depth=0)
        return self

    def _best_split(self, x: np.ndarray, y: np.ndarray) -> tuple[int, float, float] | None:
        n = x.shape[0]
        parent = _gini(np.bincount(y, minlength=2))
        best: tuple[int, float, float] | None = None
        best_score = parent - 1e-12
        for j in range(x.shape[1]):
            order = np.argsort(x[:, j], kind="stable")
            xv, yv = x[order, j], y[order]
            boundaries = np.nonzero(xv[:-1] < xv[1:])[0]
            if boundaries.size == 0:
                continue
            pos = np.cumsum(yv)
            n_left = boundaries + 1
            n_right = n - n_left
            valid = (n_left >= self.min_samples_leaf) & (n_right >= self.min_samples_leaf)
            if not np.any(valid):
                continue
            pos_left = pos[boundaries]
            pos_right = pos[-1] - pos_left
            with np.errstate(invalid="ignore"):
                gl = 1.0 - ((pos_left / n_left) ** 2 + ((n_left - pos_left) / n_left) ** 2)
                gr = 1.0 - ((pos_right / n_right) ** 2 + ((n_right - pos_right) / n_right) ** 2)
            weighted = (n_left * gl + n_right * gr) / n
            weighted = np.where(valid, weighted, np.inf)
            k = int(np.argmin(weighted))
            if weighted[k] < best_score:
                best_score = float(weighted[k])
                thr = float((xv[boundaries[k]] + xv[boundaries[k] + 1]) / 2.0)
                best = (j, thr, best_score)
        return best

    def _build(self, x: np.ndarray, y: np.ndarray, depth: int) -> _Node:
        counts = np.bincount(y, minlength=2)
        prediction = int(np.argmax(counts))  # tie goes to class 0
        if (
            depth >= self.max_depth
            or counts.min() == 0
            or x.shape[0] < 2 * self.min_samples_leaf
        ):
            return _Node(prediction)
        found = self._best_split(x, y)
        if found is None:
            return _Node(prediction)
        j, thr, _ = found
        mask = x[:, j] <= thr
        return _Node(
            prediction,
            feature=j,
            threshold=thr,
            left=self._build(x[mask], y[mask], depth + 1),
            right=self._build(x[~mask], y[~mask], depth + 1),
        )

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self._root is None:
            raise RuntimeError("predict before fit")
        x = np.asarray(x, dtype=np.float64)
        out = np.empty(x.shape[0], dtype=np.int64)
        for i, row in enumerate(x):
            node = self._root
            while not node.is_leaf:
                node = node.left if row[node.feature] <= node.threshold else node.right
            out[i] = node.prediction
        return out


_REGISTRY: dict[str, Callable[[], object]] = {}


def register_baseline(baseline_id: str, factory: Callable[[], object], replace: bool = False) -> None:
    if not baseline_id:
        raise ValueError("baseline_id must be non-empty")
    if baseline_id in _REGISTRY and not replace:
        raise ValueError(f"baseline {baseline_id!r} already registered")
    _REGISTRY[baseline_id] = factory


def available_baselines() -> list[str]:
    return sorted(_REGISTRY)


def run_baseline(
    baseline_id: str, train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray
) -> np.ndarray:
    """Fit a registered baseline and return its test predictions."""
    if baseline_id not in _REGISTRY:
        raise ValueError(
            f"unknown baseline {baseline_id!r}; registered: {available_baselines()}"
        )
    model = _REGISTRY[baseline_id]()
    model.fit(np.asarray(train_x), np.asarray(train_y))
    return np.asarray(model.predict(np.asarray(test_x)))


register_baseline("decision_tree", lambda: DecisionTree())
