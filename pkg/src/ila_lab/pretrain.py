"""Desk-scale stand-in for an ImageNet-pretrained backbone.

A randomly initialised ViT routes almost nothing from the patches into the
CLS token, so freezing it leaves adapters and head with no usable signal.
Here the whole vanilla ViT is first trained on a disjoint synthetic source
task (its own seed and classes) with Adam; the result, minus the source
head, becomes the frozen backbone for every target run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .checkpoint import read_checkpoint, write_tensors
from .data import SyntheticSpec, crop_flip_normalize, generate_synthetic, resize_all
from .errors import CheckpointError, ConfigError, DivergenceError
from .ila import IlaConfig, Variant
from .model import build_model, vit_forward
from .ops import cross_entropy_loss
from .train import evaluate_top1
from .vit import ViTConfig

logger = logging.getLogger(__name__)


def _default_source() -> SyntheticSpec:
    return SyntheticSpec(
        num_classes=50,
        samples_per_class_train=20,
        samples_per_class_test=5,
        inter_class_scale=0.5,
        intra_class_scale=0.05,
        seed=1000,
    )


class PretrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    source: SyntheticSpec = Field(default_factory=_default_source)
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"

    @model_validator(mode="after")
    def _check(self) -> "PretrainConfig":
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("pretraining needs epochs >= 1, batch_size >= 1 and lr > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return self


@dataclass
class PretrainResult:
    arrays: dict[str, np.ndarray]
    source_top1: float
    losses: list[float] = field(default_factory=list)


def cache_key(vit: ViTConfig, cfg: PretrainConfig) -> str:
    """Digest of everything that determines the pretrained arrays."""
    arch = vit.model_dump(mode="json")
    arch.pop("num_classes")
    blob = json.dumps({"vit": arch, "pretrain": cfg.model_dump(mode="json")}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def adam_step(params, m: dict, v: dict, step: int, cfg: PretrainConfig) -> None:
    for name, p in params.items():
        g = p.grad
        m[name] = cfg.beta1 * m[name] + (1 - cfg.beta1) * g
        v[name] = cfg.beta2 * v[name] + (1 - cfg.beta2) * g * g
        m_hat = m[name] / (1 - cfg.beta1**step)
        v_hat = v[name] / (1 - cfg.beta2**step)
        p.data = (p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.data.dtype, copy=False)


def pretrain_backbone(vit: ViTConfig, cfg: PretrainConfig) -> PretrainResult:
    """Train every tensor of a vanilla ViT on the source task; return the non-head arrays."""
    if cfg.source.image_size != vit.image_size:
        raise ConfigError(f"source images are {cfg.source.image_size}px, model expects {vit.image_size}px")
    src_vit = vit.model_copy(update={"num_classes": cfg.source.num_classes})
    train, test = generate_synthetic(cfg.source)
    model = build_model(src_vit, IlaConfig(variant=Variant.NONE), seed=cfg.seed, dtype=cfg.dtype)
    for t in model.params.values():
        t.requires_grad = True
    params = model.params
    m = {k: np.zeros_like(t.data) for k, t in params.items()}
    v = {k: np.zeros_like(t.data) for k, t in params.items()}
    rng = np.random.default_rng([cfg.seed, 4])
    size = vit.image_size
    resized = resize_all(train.images, size)
    losses, step = [], 0
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train))
        total = 0.0
        for b in range(math.ceil(len(train) / cfg.batch_size)):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x = np.stack([crop_flip_normalize(resized[i], "train", size, rng) for i in idx]).astype(model.dtype)
            loss = cross_entropy_loss(vit_forward(x, model), train.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step, value)
            model.zero_grad()
            loss.backward()
            step += 1
            adam_step(params, m, v, step, cfg)
            total += value * len(idx)
        losses.append(total / len(train))
        logger.info("pretrain epoch %d loss %.4f", epoch + 1, losses[-1])
    top1 = evaluate_top1(model, test)
    logger.info("pretrain source top-1 %.2f%%", top1)
    arrays = {k: t.data.copy() for k, t in params.items() if not k.startswith("head.")}
    return PretrainResult(arrays, top1, losses)


def save_backbone(path: Union[str, Path], result: PretrainResult, key: str) -> Path:
    tensors = {k: ("param", a) for k, a in result.arrays.items()}
    meta = {"pretrain_key": key, "source_top1": result.source_top1}
    return write_tensors(path, tensors, "pretrained", meta)


def load_backbone(path: Union[str, Path], key: Optional[str] = None) -> dict[str, np.ndarray]:
    manifest, arrays = read_checkpoint(path)
    if key is not None and manifest.get("metadata", {}).get("pretrain_key") != key:
        raise CheckpointError(f"{path}: pretrained backbone was built from a different configuration")
    return arrays


def pretrained_backbone(vit: ViTConfig, cfg: PretrainConfig, cache_dir: Optional[Union[str, Path]] = None) -> dict[str, np.ndarray]:
    """Pretrain, or reuse a cached result whose key matches ``(vit, cfg)``."""
    key = cache_key(vit, cfg)
    path = Path(cache_dir) / f"backbone-{key}.ckpt" if cache_dir is not None else None
    if path is not None and path.exists():
        return load_backbone(path, key)
    result = pretrain_backbone(vit, cfg)
    if path is not None:
        save_backbone(path, result, key)
    return result.arrays
