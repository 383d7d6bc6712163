"""A frozen ViT backbone composed with an adapter plan."""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Mapping, Optional, Union

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError
from .ila import (
    AdapterKind,
    AdapterPlan,
    IlaConfig,
    build_adapter_plan,
    ila_forward,
    intra_layer_adapter_forward,
    plain_ila_forward,
)
from .vit import (
    AttentionRecord,
    ParamDict,
    TokenSequence,
    ViTConfig,
    classify_head,
    encoder_block_forward,
    init_backbone,
    patchify_embed,
)

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class Model:
    vit: ViTConfig
    ila: IlaConfig
    plan: AdapterPlan
    params: ParamDict
    buffers: dict[str, np.ndarray]
    training: bool = True

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def trainable(self) -> ParamDict:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def frozen(self) -> ParamDict:
        return {n: t for n, t in self.params.items() if not t.requires_grad}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def __call__(self, images, capture: Optional[AttentionRecord] = None) -> Tensor:
        return vit_forward(images, self, capture)


def build_model(
    vit: ViTConfig,
    ila: IlaConfig,
    seed: int = 0,
    dtype: Union[str, type] = np.float64,
    backbone: Optional[Mapping[str, np.ndarray]] = None,
) -> Model:
    """Initialise backbone and adapters from ``seed``.

    The backbone stream depends only on ``(seed, vit)``, so models that differ
    only in adapter configuration share bit-identical frozen weights.
    ``backbone`` (e.g. pretrained arrays) overrides any subset of the
    initialised backbone tensors; the arrays are copied, never shared.
    """
    dtype = DTYPES.get(dtype, dtype) if isinstance(dtype, str) else dtype
    backbone_params = init_backbone(vit, np.random.default_rng([seed, 0]), dtype=dtype)
    for name, arr in (backbone or {}).items():
        if name not in backbone_params:
            raise ConfigError(f"pretrained tensor {name!r} is not part of the backbone")
        target = backbone_params[name]
        if tuple(np.shape(arr)) != target.shape:
            raise ConfigError(f"pretrained tensor {name!r} has shape {np.shape(arr)}, expected {target.shape}")
        target.data = np.array(arr, dtype=dtype, copy=True)
    plan = build_adapter_plan(vit, ila, seed=seed, dtype=dtype)
    params = dict(backbone_params)
    params.update(plan.parameters())
    for name, t in params.items():
        t.name = name
    return Model(vit, ila, plan, params, plan.buffers())


def vit_forward(
    images,
    model: Model,
    capture: Optional[AttentionRecord] = None,
    trace: Optional[list] = None,
) -> Tensor:
    """Logits ``[B, C]``.

    ``trace`` (if given) receives ``(stage, sequence_length, grid_side)``
    after the embedding, every block and every adapter.
    """
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=model.dtype))
    vit, plan, params = model.vit, model.plan, model.params
    seq = patchify_embed(images, vit, params)
    if trace is not None:
        trace.append(("embed", seq.length, seq.grid_side))
    for layer in range(1, vit.depth + 1):
        intra = plan.intra(layer)
        hook = partial(_intra_hook, intra) if intra else None
        seq = encoder_block_forward(seq, params, layer - 1, vit, capture, hook)
        if trace is not None:
            trace.append((f"block{layer}", seq.length, seq.grid_side))
        for placement in plan.after_layer(layer):
            seq = _apply_adapter(seq, placement, model)
            if trace is not None:
                trace.append((placement.name, seq.length, seq.grid_side))
    return classify_head(seq, params)


def _intra_hook(intra: dict, x: Tensor, site: str) -> Tensor:
    return intra_layer_adapter_forward(x, intra[site].params)


def _apply_adapter(seq: TokenSequence, placement, model: Model) -> TokenSequence:
    if placement.kind is AdapterKind.DOWNSAMPLING_ILA:
        return ila_forward(seq, placement.params, placement.buffers, model.ila, model.training)
    return plain_ila_forward(seq, placement.params, placement.buffers, model.ila, model.training)
