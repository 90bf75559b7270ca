"""Torchvision CNN adapters (optional; needs the 'deep' extra).

Each adapter exposes the same surface as the stubs: pooled body features,
a replaceable 256-unit head, small-scale fine-tuning with the shared Adam
settings, and head-tap extraction. Bodies are the torchvision feature
stacks with global average pooling: vgg19 512, mobilenetv2 1280,
densenet201 1920.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torchvision import models

from .. import fusion, preprocess
from . import (
    BODY_DIMS,
    HEAD_DIM,
    PRETRAINED_IDS,
    BackboneDescriptor,
    FeatureVector,
    TAPS,
    WeightsError,
    _check_input,
    BackboneError,
)

# Standard ImageNet channel statistics; pretrained bodies were trained
# against inputs normalized this way.
_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
_STD = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

_BATCH = 16


def _build_body(backbone_id: str, weights: str):
    if weights == "random":
        torch.manual_seed(0)
    tv_weights = "IMAGENET1K_V1" if weights == "imagenet" else None
    if backbone_id == "vgg19":
        net = models.vgg19(weights=tv_weights)
        body = nn.Sequential(net.features, nn.AdaptiveAvgPool2d(1), nn.Flatten())
    elif backbone_id == "mobilenetv2":
        net = models.mobilenet_v2(weights=tv_weights)
        body = nn.Sequential(net.features, nn.AdaptiveAvgPool2d(1), nn.Flatten())
    elif backbone_id == "densenet201":
        net = models.densenet201(weights=tv_weights)
        body = nn.Sequential(net.features, nn.ReLU(inplace=False), nn.AdaptiveAvgPool2d(1), nn.Flatten())
    else:
        raise ValueError(f"unknown pretrained backbone {backbone_id!r}")
    return net, body


class PretrainedBackbone:
    def __init__(self, backbone_id: str, weights: str, weights_path: str | Path | None = None):
        if backbone_id not in PRETRAINED_IDS:
            raise ValueError(f"unknown pretrained backbone {backbone_id!r}")
        self.backbone_id = backbone_id
        self.weights_source = weights
        try:
            net, body = _build_body(backbone_id, weights)
        except Exception as exc:  # torchvision raises urllib errors for missing downloads
            raise WeightsError(f"{backbone_id}: could not build '{weights}' weights: {exc}") from exc
        if weights == "file":
            state = torch.load(str(weights_path), map_location="cpu")
            missing = net.load_state_dict(state, strict=False)
            if len(missing.missing_keys) == len(net.state_dict()):
                raise WeightsError(f"{backbone_id}: state dict at {weights_path} matched nothing")
        self._body = body.eval()
        self._head: nn.Sequential | None = None

    @property
    def descriptor(self) -> BackboneDescriptor:
        return BackboneDescriptor(
            self.backbone_id, BODY_DIMS[self.backbone_id], weights_source=self.weights_source
        )

    @property
    def has_head(self) -> bool:
        return self._head is not None

    def _to_tensor(self, images: Sequence[preprocess.ImageTensor]) -> torch.Tensor:
        arrs = []
        for img in images:
            _check_input(img, self.backbone_id)
            arrs.append(np.transpose(img.pixels, (2, 0, 1)))
        x = torch.from_numpy(np.asarray(arrs, dtype=np.float32))
        return (x - _MEAN) / _STD

    def body_features(self, images: Sequence[preprocess.ImageTensor]) -> np.ndarray:
        x = self._to_tensor(images)
        outs = []
        self._body.eval()
        with torch.no_grad():
            for start in range(0, x.shape[0], _BATCH):
                outs.append(self._body(x[start : start + _BATCH]))
        return torch.cat(outs).numpy().astype(np.float32)

    def replace_head(self, num_classes: int = 2, seed: int = 0) -> "PretrainedBackbone":
        if num_classes != 2:
            raise ValueError(f"head is binary; num_classes must be 2, got {num_classes}")
        torch.manual_seed(seed)
        dim = BODY_DIMS[self.backbone_id]
        head = nn.Sequential(
            nn.Linear(dim, HEAD_DIM), nn.ReLU(), nn.Dropout(0.5), nn.Linear(HEAD_DIM, 2)
        )
        out = object.__new__(PretrainedBackbone)
        out.backbone_id = self.backbone_id
        out.weights_source = self.weights_source
        out._body = self._body  # body tensors shared, bit-identical
        out._head = head
        return out

    def fine_tune(
        self,
        images: Sequence[preprocess.ImageTensor],
        labels: Sequence[int],
        cfg: fusion.TrainConfig,
    ) -> tuple["PretrainedBackbone", tuple[fusion.EpochStats, ...]]:
        backbone = self if self.has_head else self.replace_head(seed=cfg.seed)
        torch.manual_seed(cfg.seed)
        x = backbone._to_tensor(images)
        y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        model = nn.Sequential(backbone._body, backbone._head)
        opt = torch.optim.Adam(
            model.parameters(),
            lr=cfg.learning_rate,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.epsilon,
        )
        loss_fn = nn.CrossEntropyLoss()
        history = []
        model.train()
        for epoch in range(1, cfg.max_epochs + 1):
            perm = torch.randperm(x.shape[0])
            total = 0.0
            for start in range(0, x.shape[0], cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                opt.zero_grad()
                loss = loss_fn(model(x[idx]), y[idx])
                loss.backward()
                opt.step()
                total += float(loss) * idx.numel()
            model.eval()
            with torch.no_grad():
                acc = float((model(x).argmax(dim=1) == y).float().mean())
            model.train()
            history.append(fusion.EpochStats(epoch, total / x.shape[0], acc))
        model.eval()
        return backbone, tuple(history)

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
            with torch.no_grad():
                hidden = self._head[1](self._head[0](torch.from_numpy(body)))
            body = hidden.numpy().astype(np.float32)
        refs = list(range(len(images))) if sample_refs is None else [int(r) for r in sample_refs]
        if len(refs) != len(images):
            raise ValueError(f"got {len(refs)} sample_refs for {len(images)} images")
        return [FeatureVector(body[i], self.backbone_id, refs[i]) for i in range(len(images))]
