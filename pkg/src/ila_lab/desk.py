"""Reference desk-scale protocol for the RSDS ablation and the attention-CKA study.

One pretrained toy backbone is shared by every run, the dataset is fixed,
each arm picks its learning rate by the grid search on the first seed, and
then trains on every seed with the full recipe (50 epochs, 500 warm-up
steps, SGD momentum 0.9, batch 8).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .analysis import attention_cka_matrix
from .config import DataConfig, ExperimentConfig
from .data import SyntheticSpec, generate_synthetic
from .errors import InputError
from .ila import IlaConfig, RsdsMode, Variant
from .model import build_model
from .pretrain import PretrainConfig, pretrained_backbone
from .train import TrainConfig, eval_images, lr_search, train_model
from .vit import ViTConfig

logger = logging.getLogger(__name__)

DESK_VIT = ViTConfig(image_size=32, patch_size=4, depth=6, hidden_dim=32, num_heads=4, num_classes=20)
DESK_DATA = SyntheticSpec(
    num_classes=20,
    samples_per_class_train=10,
    samples_per_class_test=10,
    image_size=32,
    inter_class_scale=0.3,
    intra_class_scale=0.1,
    seed=0,
)
DESK_BOTTLENECK = 8
DESK_SEEDS = (0, 1, 2)
PROBE_SIZE = 64

# arm name -> adapter config; "linear-probe" is the frozen backbone with a trainable head
ARMS = {
    "dwc-near-ones": IlaConfig(rsds_mode=RsdsMode.DWC_NEAR_ONES, bottleneck_dim=DESK_BOTTLENECK),
    "avgpool": IlaConfig(rsds_mode=RsdsMode.AVG_POOL, bottleneck_dim=DESK_BOTTLENECK),
    "dwc-normal": IlaConfig(rsds_mode=RsdsMode.DWC_NORMAL, bottleneck_dim=DESK_BOTTLENECK),
    "conv": IlaConfig(rsds_mode=RsdsMode.FULL_CONV, bottleneck_dim=DESK_BOTTLENECK),
    "no-rsds": IlaConfig(rsds_mode=RsdsMode.NONE, bottleneck_dim=DESK_BOTTLENECK),
    "linear-probe": IlaConfig(variant=Variant.NONE, bottleneck_dim=DESK_BOTTLENECK),
}


def desk_config(arm: str = "dwc-near-ones", output_dir: str = "runs/desk") -> ExperimentConfig:
    """The protocol as an :class:`ExperimentConfig` (what the CLI runs)."""
    return ExperimentConfig(
        model=DESK_VIT,
        adapter=ARMS[arm],
        training=TrainConfig(),
        data=DataConfig(synthetic=DESK_DATA),
        pretrain=PretrainConfig(),
        output_dir=output_dir,
        seeds=list(DESK_SEEDS),
        probe_size=PROBE_SIZE,
    )


@dataclass
class ArmResult:
    arm: str
    chosen_lr: float
    search_rows: list[dict]
    top1: dict[int, float] = field(default_factory=dict)
    cka: dict[int, Optional[float]] = field(default_factory=dict)

    @property
    def mean_top1(self) -> float:
        return float(np.mean(list(self.top1.values())))


def probe_batch(test, size: int = PROBE_SIZE, image_size: int = 32) -> np.ndarray:
    idx = np.floor(np.arange(size) * (len(test) / size)).astype(np.int64)
    return eval_images(test.subset(idx), image_size)


def run_arm(
    arm: str,
    backbone: dict,
    seeds: Sequence[int] = DESK_SEEDS,
    data: SyntheticSpec = DESK_DATA,
    training: TrainConfig = TrainConfig(),
    with_cka: bool = True,
) -> ArmResult:
    ila = ARMS[arm]
    train, test = generate_synthetic(data)
    first = training.model_copy(update={"seed": seeds[0]})
    search = lr_search(lambda: build_model(DESK_VIT, ila, seed=seeds[0], dtype=training.dtype, backbone=backbone), train, first)
    result = ArmResult(arm, search.chosen_lr, search.rows)
    probe = probe_batch(test, image_size=DESK_VIT.image_size) if with_cka else None
    for seed in seeds:
        model = build_model(DESK_VIT, ila, seed=seed, dtype=training.dtype, backbone=backbone)
        cfg = training.model_copy(update={"seed": seed, "base_lr": search.chosen_lr})
        result.top1[seed] = train_model(model, train, test, cfg).final_eval_top1
        if with_cka:
            try:
                result.cka[seed] = attention_cka_matrix(model, probe).mean_off_diagonal()
            except InputError as exc:  # collapsed attention (e.g. no residual branch) has no CKA
                logger.info("%s seed %d: CKA undefined (%s)", arm, seed, exc)
                result.cka[seed] = None
        logger.info("%s seed %d lr %g top-1 %.2f", arm, seed, search.chosen_lr, result.top1[seed])
    return result


def run_protocol(
    arms: Sequence[str] = ("dwc-near-ones", "avgpool", "dwc-normal", "no-rsds", "linear-probe"),
    seeds: Sequence[int] = DESK_SEEDS,
    cache_dir: Optional[str] = None,
) -> dict[str, ArmResult]:
    backbone = pretrained_backbone(DESK_VIT, PretrainConfig(), cache_dir)
    return {arm: run_arm(arm, backbone, seeds) for arm in arms}
