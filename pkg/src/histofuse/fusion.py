"""Feature fusion and the two-layer softmax classifier head.

Fusion concatenates per-backbone feature vectors in a fixed backbone
order. The classifier is a dense layer (256 units, ReLU, inverted
dropout) into a 2-way softmax, trained with cross-entropy and a
from-scratch Adam. Training is deterministic given config and seed, and
invariant to the order in which fused samples are handed in (samples are
canonically sorted by sample_ref before training).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datasets import BinaryLabel

# Pretrained backbones first, then the self-contained stubs. Fusion always
# concatenates in this order no matter how the caller passed the sets.
FUSION_ORDER = ("vgg19", "mobilenetv2", "densenet201", "stub_a", "stub_b", "stub_c")

_PARAM_KEYS = ("w1", "b1", "w2", "b2")
_MODEL_MAGIC = b"HFM1"


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and head settings. The defaults are the published recipe:
    Adam with beta1 0.6 / beta2 0.8 at lr 1e-4, batch 32, 256 hidden units,
    dropout 0.5."""

    learning_rate: float = 1e-4
    beta1: float = 0.6
    beta2: float = 0.8
    epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 200
    hidden_units: int = 256
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            val = getattr(self, name)
            if not 0.0 <= val < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {val}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.hidden_units < 1:
            raise ValueError(f"hidden_units must be >= 1, got {self.hidden_units}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class FusedFeature:
    """One sample's concatenated features plus which backbone owns which
    slice (layout: tuple of (backbone_id, dim) in concatenation order)."""

    values: np.ndarray
    layout: tuple[tuple[str, int], ...]
    sample_ref: int
    label: BinaryLabel

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 1 or v.size == 0:
            raise ValueError(f"values must be a non-empty 1-d vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite feature values for sample {self.sample_ref}")
        layout = tuple((str(b), int(d)) for b, d in self.layout)
        if sum(d for _, d in layout) != v.size:
            raise ValueError(
                f"layout dims {layout} sum to {sum(d for _, d in layout)}, "
                f"but values have {v.size} entries"
            )
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "label", BinaryLabel(self.label))


def _order_rank(backbone_id: str) -> tuple[int, str]:
    if backbone_id in FUSION_ORDER:
        return (FUSION_ORDER.index(backbone_id), backbone_id)
    return (len(FUSION_ORDER), backbone_id)


def fuse(feature_sets: Sequence[Sequence], labels: Sequence[int]) -> list[FusedFeature]:
    """Concatenate per-backbone FeatureVector sets into FusedFeatures.

    Every set must cover exactly the same sample_refs. `labels` is aligned
    with ascending sample_ref order. Sets are reordered into FUSION_ORDER
    before concatenation, so callers cannot accidentally produce two
    different layouts for the same backbones.
    """
    if not feature_sets:
        raise ValueError("need at least one feature set")
    prepared = []
    for fs in feature_sets:
        fs = list(fs)
        if not fs:
            raise ValueError("empty feature set")
        ids = {f.backbone_id for f in fs}
        if len(ids) != 1:
            raise ValueError(f"one set mixes backbones: {sorted(ids)}")
        dims = {f.values.size for f in fs}
        if len(dims) != 1:
            raise ValueError(f"inconsistent feature dims within {ids.pop()!r}: {sorted(dims)}")
        fs.sort(key=lambda f: f.sample_ref)
        refs = [f.sample_ref for f in fs]
        if len(set(refs)) != len(refs):
            raise ValueError(f"duplicate sample_ref in {fs[0].backbone_id!r} set")
        prepared.append((fs[0].backbone_id, fs))
    ref0 = [f.sample_ref for f in prepared[0][1]]
    for backbone_id, fs in prepared[1:]:
        refs = [f.sample_ref for f in fs]
        if refs != ref0:
            diff = next((a, b) for a, b in zip(ref0, refs + [None] * len(ref0)) if a != b)
            raise ValueError(
                f"feature sets cover different samples: {prepared[0][0]!r} vs "
                f"{backbone_id!r} first disagree at sample_ref {diff[0]} vs {diff[1]}"
            )
    if len(labels) != len(ref0):
        raise ValueError(f"got {len(labels)} labels for {len(ref0)} samples")
    prepared.sort(key=lambda item: _order_rank(item[0]))
    layout = tuple((backbone_id, fs[0].values.size) for backbone_id, fs in prepared)
    fused = []
    for i, ref in enumerate(ref0):
        values = np.concatenate([fs[i].values for _, fs in prepared])
        fused.append(FusedFeature(values, layout, ref, BinaryLabel(int(labels[i]))))
    return fused


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


@dataclass(frozen=True)
class ClassifierModel:
    """Trained head: params dict (w1, b1, w2, b2), the config it was
    trained under, per-epoch history, and the fused layout it expects."""

    params: dict[str, np.ndarray]
    config: TrainConfig
    history: tuple[EpochStats, ...]
    layout: tuple[tuple[str, int], ...] | None = None

    @property
    def input_dim(self) -> int:
        return self.params["w1"].shape[0]


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Pure: returns fresh params/state."""
    if set(grads) != set(params):
        raise ValueError(f"gradient keys {sorted(grads)} do not match params {sorted(params)}")
    t = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match param {key!r} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {key!r}")
        m = cfg.beta1 * state.m[key] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[key] + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        new_params[key] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        new_m[key] = m
        new_v[key] = v
    return new_params, AdamState(t, new_m, new_v)


def init_params(input_dim: int, hidden_units: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform fan-in init, biases zero."""
    lim1 = 1.0 / np.sqrt(input_dim)
    lim2 = 1.0 / np.sqrt(hidden_units)
    return {
        "w1": rng.uniform(-lim1, lim1, size=(input_dim, hidden_units)),
        "b1": np.zeros(hidden_units),
        "w2": rng.uniform(-lim2, lim2, size=(hidden_units, 2)),
        "b2": np.zeros(2),
    }


def _forward(
    params: dict[str, np.ndarray], x: np.ndarray, dropout_mask: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    z1 = x @ params["w1"] + params["b1"]
    a1 = np.maximum(z1, 0.0)
    if dropout_mask is not None:
        a1 = a1 * dropout_mask
    z2 = a1 @ params["w2"] + params["b2"]
    z2 = z2 - z2.max(axis=1, keepdims=True)
    exp = np.exp(z2)
    probs = exp / exp.sum(axis=1, keepdims=True)
    return z1, a1, probs


def _loss_and_grads(
    params: dict[str, np.ndarray],
    x: np.ndarray,
    y: np.ndarray,
    dropout_mask: np.ndarray | None,
) -> tuple[float, dict[str, np.ndarray]]:
    n = x.shape[0]
    z1, a1, probs = _forward(params, x, dropout_mask)
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(n), y], 1e-12))))
    dz2 = probs.copy()
    dz2[np.arange(n), y] -= 1.0
    dz2 /= n
    grads = {
        "w2": a1.T @ dz2,
        "b2": dz2.sum(axis=0),
    }
    da1 = dz2 @ params["w2"].T
    if dropout_mask is not None:
        da1 = da1 * dropout_mask
    dz1 = da1 * (z1 > 0.0)
    grads["w1"] = x.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return loss, grads


def hidden_features(params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Post-ReLU activations of the hidden layer, dropout off."""
    _, a1, _ = _forward(params, np.asarray(x, dtype=np.float64))
    return a1


def train_mlp(
    x: np.ndarray, y: np.ndarray, cfg: TrainConfig
) -> tuple[dict[str, np.ndarray], tuple[EpochStats, ...]]:
    """Train on arrays in the order given. Per-epoch shuffling, dropout
    masks and init all come from one generator seeded with cfg.seed, so a
    run is a pure function of (x, y, cfg)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ValueError(f"bad training shapes: x {x.shape}, y {y.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite training features")
    counts = np.bincount(y, minlength=2)
    if counts.size > 2 or np.any(counts[:2] < 2):
        raise ValueError(f"need at least 2 samples of each class, got counts {counts.tolist()}")

    n = x.shape[0]
    rng = np.random.default_rng(cfg.seed)
    params = init_params(x.shape[1], cfg.hidden_units, rng)
    state = AdamState.zeros_like(params)
    history: list[EpochStats] = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]  # last partial batch kept
            mask = None
            if cfg.dropout > 0.0:
                keep = rng.random((batch.size, cfg.hidden_units)) >= cfg.dropout
                mask = keep / (1.0 - cfg.dropout)
            loss, grads = _loss_and_grads(params, x[batch], y[batch], mask)
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch}")
            params, state = adam_step(params, grads, state, cfg)
            total_loss += loss * batch.size
        _, _, probs = _forward(params, x)
        acc = float(np.mean(probs.argmax(axis=1) == y))
        history.append(EpochStats(epoch, total_loss / n, acc))
    return params, tuple(history)


def train_classifier(fused: Sequence[FusedFeature], cfg: TrainConfig) -> ClassifierModel:
    """Train the head on fused features. Input order does not matter:
    samples are sorted by sample_ref before anything touches the RNG."""
    if not fused:
        raise ValueError("no fused features to train on")
    layouts = {f.layout for f in fused}
    if len(layouts) != 1:
        raise ValueError(f"mixed feature layouts: {sorted(layouts)}")
    ordered = sorted(fused, key=lambda f: f.sample_ref)
    refs = [f.sample_ref for f in ordered]
    if len(set(refs)) != len(refs):
        raise ValueError("duplicate sample_ref among fused features")
    x = np.stack([f.values for f in ordered]).astype(np.float64)
    y = np.array([int(f.label) for f in ordered])
    params, history = train_mlp(x, y, cfg)
    return ClassifierModel(params, cfg, history, ordered[0].layout)


def predict(
    model: ClassifierModel, feature: FusedFeature | np.ndarray
) -> tuple[BinaryLabel, tuple[float, float]]:
    """Classify one sample; returns (label, (p_benign, p_malignant))."""
    values = feature.values if isinstance(feature, FusedFeature) else np.asarray(feature)
    if values.ndim != 1 or values.size != model.input_dim:
        raise ValueError(f"feature has {values.size} dims, model expects {model.input_dim}")
    _, _, probs = _forward(model.params, values.astype(np.float64)[None, :])
    p = probs[0]
    return BinaryLabel(int(p.argmax())), (float(p[0]), float(p[1]))


def predict_batch(model: ClassifierModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"feature matrix {x.shape} does not match model input {model.input_dim}")
    _, _, probs = _forward(model.params, x)
    return probs.argmax(axis=1), probs


def save_classifier(model: ClassifierModel, path: str | Path) -> None:
    """Binary model container: magic, length-prefixed JSON header, then the
    four parameter arrays as little-endian float64 in fixed order."""
    header = {
        "version": 1,
        "shapes": {k: list(model.params[k].shape) for k in _PARAM_KEYS},
        "config": {
            "learning_rate": model.config.learning_rate,
            "beta1": model.config.beta1,
            "beta2": model.config.beta2,
            "epsilon": model.config.epsilon,
            "batch_size": model.config.batch_size,
            "max_epochs": model.config.max_epochs,
            "hidden_units": model.config.hidden_units,
            "dropout": model.config.dropout,
            "seed": model.config.seed,
        },
        "history": [[h.epoch, h.loss, h.accuracy] for h in model.history],
        "layout": [list(pair) for pair in model.layout] if model.layout else None,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for key in _PARAM_KEYS:
            fh.write(np.ascontiguousarray(model.params[key], dtype="<f8").tobytes())


def load_classifier(path: str | Path) -> ClassifierModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _MODEL_MAGIC:
        raise ValueError(f"{path}: not a classifier file (bad magic {raw[:4]!r})")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    offset = 8 + hlen
    params: dict[str, np.ndarray] = {}
    for key in _PARAM_KEYS:
        shape = tuple(header["shapes"][key])
        count = int(np.prod(shape))
        end = offset + count * 8
        if end > len(raw):
            raise ValueError(f"{path}: truncated parameter block for {key!r}")
        params[key] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    cfg = TrainConfig(**header["config"])
    history = tuple(EpochStats(int(e), float(l), float(a)) for e, l, a in header["history"])
    layout = tuple((b, int(d)) for b, d in header["layout"]) if header["layout"] else None
    return ClassifierModel(params, cfg, history, layout)
