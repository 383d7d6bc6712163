"""SGD-momentum fine-tuning of adapter models with a warmup-cosine schedule."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .autodiff import Tensor, no_grad
from .data import Split, crop_flip_normalize, resize_all
from .errors import ConfigError, DivergenceError, UsageError
from .model import Model, vit_forward
from .ops import cross_entropy_loss

logger = logging.getLogger(__name__)

EVAL_BATCH = 64


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    base_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    warmup_steps: int = 500
    epochs: int = 50
    seed: int = 0
    lr_grid: tuple[float, ...] = (0.3, 0.1, 0.03, 0.01, 0.003)
    search_epochs: int = 10
    val_fraction: float = 0.2
    dtype: str = "float32"

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.base_lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("need base_lr >= 0 and 0 <= momentum < 1")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_steps < 0 or self.search_epochs < 1:
            raise ValueError("batch_size and search_epochs must be >= 1; epochs, warmup_steps >= 0")
        if not self.lr_grid:
            raise ValueError("lr_grid must be non-empty")
        if any(lr <= 0 for lr in self.lr_grid):
            raise ValueError("lr_grid entries must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return self

    def total_steps(self, num_train: int) -> int:
        return self.epochs * math.ceil(num_train / self.batch_size)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_top1: float
    eval_top1: float


@dataclass
class TrainReport:
    seed: int
    base_lr: float
    epochs: list[EpochRecord] = field(default_factory=list)
    final_eval_top1: float = 0.0
    total_steps: int = 0
    wall_clock_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        """JSON-ready dict; wall-clock is opt-in so reports stay byte-reproducible."""
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock_s")
        return d


# ---------------------------------------------------------------- optimiser


def sgd_momentum_step(params: dict[str, Tensor], state: dict[str, np.ndarray], lr: float, momentum: float) -> None:
    """``v <- momentum * v + g``; ``w <- w - lr * v`` for every trainable tensor."""
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise UsageError(f"trainable tensor {name!r} has no gradient")
        v = state.get(name)
        v = p.grad.copy() if v is None else momentum * v + p.grad
        state[name] = v
        p.data = (p.data - lr * v).astype(p.data.dtype, copy=False)


def cosine_warmup_lr(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp to ``base_lr`` over ``warmup_steps``, then half-cosine to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- evaluation


def predict(model: Model, images: np.ndarray) -> np.ndarray:
    """Logits for already-preprocessed images, in eval mode and without a graph."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(images), EVAL_BATCH):
                out.append(vit_forward(images[i : i + EVAL_BATCH].astype(model.dtype, copy=False), model).data)
    finally:
        model.training = was_training
    return np.concatenate(out) if out else np.zeros((0, model.vit.num_classes))


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    """Percent of rows whose argmax (lowest index on ties) equals the label."""
    if len(labels) == 0:
        raise UsageError("cannot evaluate on an empty split")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))


def eval_images(split: Split, target_size: int) -> np.ndarray:
    resized = resize_all(split.images, target_size)
    return np.stack([crop_flip_normalize(im, "eval", target_size) for im in resized]) if len(split) else resized


def evaluate_top1(model: Model, split: Split) -> float:
    return top1(predict(model, eval_images(split, model.vit.image_size)), split.labels)


# ---------------------------------------------------------------- training loop


def train_model(
    model: Model,
    train: Split,
    test: Split,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainReport:
    """Fine-tune the trainable tensors of ``model``; evaluate on ``test`` after each epoch.

    Data order and augmentation draw from a generator seeded by ``cfg.seed``
    only, so (seed, config, data) fully determine the report.
    """
    if len(train) == 0:
        raise UsageError("empty training split")
    if train.num_classes != model.vit.num_classes:
        raise ConfigError(f"dataset has {train.num_classes} classes, head has {model.vit.num_classes}")
    size = model.vit.image_size
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.epochs and cfg.warmup_steps >= total:
        raise ConfigError(f"warmup_steps {cfg.warmup_steps} must be below total steps {total}")
    rng = np.random.default_rng([cfg.seed, 2])
    resized = resize_all(train.images, size)
    test_x = eval_images(test, size)
    params = model.trainable()
    state: dict[str, np.ndarray] = {}
    report = TrainReport(seed=cfg.seed, base_lr=cfg.base_lr, total_steps=total)
    start = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(train))
        losses, correct = [], 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x = np.stack([crop_flip_normalize(resized[i], "train", size, rng) for i in idx])
            y = train.labels[idx]
            logits = vit_forward(x.astype(model.dtype), model)
            loss = cross_entropy_loss(logits, y)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step, value)
            model.zero_grad()
            loss.backward()
            sgd_momentum_step(params, state, cosine_warmup_lr(step, cfg.base_lr, cfg.warmup_steps, total), cfg.momentum)
            losses.append(value * len(idx))
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
            step += 1
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.sum(losses) / len(train)),
            train_top1=100.0 * correct / len(train),
            eval_top1=top1(predict(model, test_x), test.labels),
        )
        report.epochs.append(record)
        logger.info("epoch %d loss %.4f train %.2f%% eval %.2f%%", epoch, record.train_loss, record.train_top1, record.eval_top1)
        if on_epoch is not None:
            on_epoch(record)
    model.zero_grad()
    report.final_eval_top1 = report.epochs[-1].eval_top1 if report.epochs else top1(predict(model, test_x), test.labels)
    report.wall_clock_s = time.perf_counter() - start
    return report


# ---------------------------------------------------------------- learning-rate search


@dataclass
class LrSearchResult:
    chosen_lr: float
    rows: list[dict]  # one per grid value: lr, val_top1 (None if diverged), status


def stratified_split(labels: np.ndarray, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; each class with >= 2 samples gives >= 1 to validation."""
    rng = np.random.default_rng([seed, 3])
    train_idx, val_idx = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_val = int(math.floor(val_fraction * len(idx)))
        if len(idx) >= 2:
            n_val = min(max(n_val, 1), len(idx) - 1)
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return np.sort(np.asarray(train_idx, dtype=np.int64)), np.sort(np.asarray(val_idx, dtype=np.int64))


def search_config(cfg: TrainConfig, lr: float) -> TrainConfig:
    """Short-run config: ``search_epochs`` epochs, warmup scaled by the same ratio."""
    ratio = cfg.search_epochs / cfg.epochs if cfg.epochs else 1.0
    return cfg.model_copy(
        update={"base_lr": lr, "epochs": cfg.search_epochs, "warmup_steps": int(cfg.warmup_steps * min(ratio, 1.0))}
    )


RunFn = Callable[[float, Split, Split], float]


def lr_search(
    model_factory: Callable[[], Model],
    train: Split,
    cfg: TrainConfig,
    run: Optional[RunFn] = None,
) -> LrSearchResult:
    """Pick the grid LR with the best validation top-1 (ties go to the smaller LR).

    ``run(lr, sub_train, val) -> val_top1`` defaults to a short
    :func:`train_model` on a fresh model; it may be injected for testing.
    """
    tr_idx, val_idx = stratified_split(train.labels, cfg.val_fraction, cfg.seed)
    if len(val_idx) == 0 or len(tr_idx) == 0:
        raise UsageError("training split too small to carve a validation subset")
    sub, val = train.subset(tr_idx), train.subset(val_idx)

    def _default_run(lr: float, sub_train: Split, val_split: Split) -> float:
        return train_model(model_factory(), sub_train, val_split, search_config(cfg, lr)).final_eval_top1

    run = run or _default_run
    rows = []
    best: Optional[tuple[float, float]] = None
    for lr in sorted(cfg.lr_grid):
        try:
            acc = float(run(lr, sub, val))
            rows.append({"lr": lr, "val_top1": acc, "status": "ok"})
            if best is None or acc > best[1]:
                best = (lr, acc)
        except DivergenceError as exc:
            rows.append({"lr": lr, "val_top1": None, "status": f"diverged at step {exc.step}"})
    if best is None:
        detail = "; ".join(f"lr={r['lr']}: {r['status']}" for r in rows)
        raise DivergenceError(-1, float("nan"), f"every learning rate diverged: {detail}")
    return LrSearchResult(best[0], rows)
