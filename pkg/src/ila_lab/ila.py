"""Inter-layer adapters with dual spatial down-sampling branches.

A down-sampling adapter sits between encoder groups. Its main branch is

    CDS -> depthwise KxK conv (no padding) -> BN -> GELU -> PWConv -> CUS

and its residual branch (RSDS) is a depthwise KxK conv with the same stride
whose kernel starts near one, i.e. a learnable identity (K=1) or sum pool
(K>1). Both outputs share the reduced grid and are added. The CLS token has no
spatial position: it takes the channel path of the main branch and a
per-channel gate in the residual branch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .autodiff import Tensor, transpose
from .errors import ConfigError
from .ops import batch_norm, conv2d, depthwise_conv2d, gelu, linear, pointwise_conv2d
from .vit import TRAINABLE_BACKBONE_PREFIXES, TokenSequence, ViTConfig, backbone_shapes, trunc_normal

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class Variant(str, enum.Enum):
    NONE = "none"
    ILA = "ila"
    ILA_PLUS = "ila+"
    ILA_PLUS_PLUS = "ila++"


class RsdsMode(str, enum.Enum):
    DWC_NEAR_ONES = "dwc-near-ones"
    DWC_NORMAL = "dwc-normal"
    AVG_POOL = "avgpool"
    FULL_CONV = "conv"
    NONE = "none"


class AdapterKind(str, enum.Enum):
    DOWNSAMPLING_ILA = "downsampling_ila"
    PLAIN_ILA = "plain_ila"
    INTRA_LAYER = "intra_layer"


class IlaConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    variant: Variant = Variant.ILA
    bottleneck_dim: Optional[int] = None  # None -> hidden_dim // 16
    kernel_size: int = 3
    stride: int = 1
    padding: int = 0
    rsds_mode: RsdsMode = RsdsMode.DWC_NEAR_ONES
    near_ones_std: float = 0.02
    intra_adapter_dim: Optional[int] = None  # None -> hidden_dim // 16
    plain_kernel_size: int = 3

    @model_validator(mode="after")
    def _check(self) -> "IlaConfig":
        if self.padding != 0:
            raise ValueError("down-sampling adapters use no padding (padding must be 0)")
        if self.kernel_size < 1 or self.stride < 1:
            raise ValueError("kernel_size and stride must be >= 1")
        if self.near_ones_std < 0:
            raise ValueError("near_ones_std must be >= 0")
        if self.plain_kernel_size < 1 or self.plain_kernel_size % 2 == 0:
            raise ValueError("plain_kernel_size must be odd so symmetric padding keeps the grid")
        for name in ("bottleneck_dim", "intra_adapter_dim"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be positive")
        return self

    def bottleneck(self, vit: ViTConfig) -> int:
        return self.bottleneck_dim or max(1, vit.hidden_dim // 16)

    def intra_dim(self, vit: ViTConfig) -> int:
        return self.intra_adapter_dim or max(1, vit.hidden_dim // 16)


def downsampled_side(g: int, kernel: int, stride: int) -> int:
    return (g - kernel) // stride + 1


def grid_chain(vit: ViTConfig, ila: IlaConfig) -> list[int]:
    """Grid side of each encoder group; raises ConfigError if a stage is infeasible."""
    sides = [vit.grid_side]
    if ila.variant is Variant.NONE:
        return sides * 3
    for stage in (1, 2):
        g = sides[-1]
        if g < ila.kernel_size:
            raise ConfigError(
                f"down-sampling stage {stage}: grid {g}x{g} is smaller than kernel {ila.kernel_size}"
            )
        sides.append(downsampled_side(g, ila.kernel_size, ila.stride))
    return sides


def plain_ila_layers(depth: int) -> list[int]:
    """Layers (1-based) followed by a non-down-sampling adapter in ILA+.

    The midpoint of each encoder group: {2, 6, 10} for depth 12, {1, 3, 5}
    for depth 6.
    """
    if depth % 6:
        raise ConfigError(f"ila+ needs depth divisible by 6 to place mid-group adapters, got {depth}")
    g = depth // 3
    return [k * g + g // 2 for k in range(3)]


def init_near_ones(shape, eps: float, seed=None, dtype=np.float64, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Entries ``1 + Normal(0, eps^2)``, reproducible from ``seed`` (or ``rng``)."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(seed)
    data = 1.0 + eps * rng.standard_normal(shape)
    return Tensor(data.astype(dtype), requires_grad=True)


@dataclass
class Placement:
    """One adapter site and its tensors (keys are local to the adapter)."""

    layer: int
    kind: AdapterKind
    name: str
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class AdapterPlan:
    vit: ViTConfig
    ila: IlaConfig
    placements: list[Placement]
    frozen: frozenset[str]
    grids: list[int]

    def after_layer(self, layer: int) -> list[Placement]:
        return [
            p for p in self.placements
            if p.layer == layer and p.kind is not AdapterKind.INTRA_LAYER
        ]

    def intra(self, layer: int) -> dict[str, Placement]:
        """Intra-layer adapters of block ``layer`` (1-based), keyed by site."""
        return {
            p.name.rsplit(".", 1)[-1]: p
            for p in self.placements
            if p.layer == layer and p.kind is AdapterKind.INTRA_LAYER
        }

    def parameters(self) -> dict[str, Tensor]:
        return {f"adapters.{p.name}.{k}": t for p in self.placements for k, t in p.params.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"adapters.{p.name}.{k}": b for p in self.placements for k, b in p.buffers.items()}

    def count(self, kind: AdapterKind) -> int:
        return sum(p.kind is kind for p in self.placements)


# ---------------------------------------------------------------- construction


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def _main_branch_params(d: int, hidden: int, kernel: int, rng, dtype) -> tuple[dict, dict]:
    params = {
        "cds.weight": _param(trunc_normal(rng, (hidden, d), dtype=dtype)),
        "cds.bias": _param(np.zeros(hidden, dtype=dtype)),
        "dw.weight": _param(trunc_normal(rng, (hidden, kernel, kernel), dtype=dtype)),
        "bn.weight": _param(np.ones(hidden, dtype=dtype)),
        "bn.bias": _param(np.zeros(hidden, dtype=dtype)),
        "pw.weight": _param(trunc_normal(rng, (hidden, hidden), dtype=dtype)),
        "pw.bias": _param(np.zeros(hidden, dtype=dtype)),
        "cus.weight": _param(np.zeros((d, hidden), dtype=dtype)),
        "cus.bias": _param(np.zeros(d, dtype=dtype)),
    }
    buffers = {
        "bn.running_mean": np.zeros(hidden, dtype=dtype),
        "bn.running_var": np.ones(hidden, dtype=dtype),
    }
    return params, buffers


def _rsds_params(d: int, cfg: IlaConfig, rng, dtype) -> dict[str, Tensor]:
    k = cfg.kernel_size
    mode = cfg.rsds_mode
    if mode is RsdsMode.DWC_NEAR_ONES:
        return {
            "rsds.weight": init_near_ones((d, k, k), cfg.near_ones_std, rng=rng, dtype=dtype),
            "rsds.cls_gate": init_near_ones((d,), cfg.near_ones_std, rng=rng, dtype=dtype),
        }
    if mode is RsdsMode.DWC_NORMAL:
        # fan-in scaled normal: variance preserving for a KxK per-channel filter
        return {
            "rsds.weight": _param((rng.standard_normal((d, k, k)) / k).astype(dtype)),
            "rsds.cls_gate": _param(rng.standard_normal(d).astype(dtype)),
        }
    if mode is RsdsMode.FULL_CONV:
        bound = 1.0 / np.sqrt(d * k * k)
        return {
            "rsds.weight": _param(rng.uniform(-bound, bound, (d, d, k, k)).astype(dtype)),
            "rsds.cls_gate": _param(np.ones(d, dtype=dtype)),
        }
    return {}


def _intra_params(d: int, a: int, rng, dtype) -> dict[str, Tensor]:
    return {
        "down.weight": _param(trunc_normal(rng, (d, a), dtype=dtype)),
        "down.bias": _param(np.zeros(a, dtype=dtype)),
        "up.weight": _param(np.zeros((a, d), dtype=dtype)),
        "up.bias": _param(np.zeros(d, dtype=dtype)),
    }


def frozen_parameter_set(plan: AdapterPlan) -> frozenset[str]:
    """Backbone tensors that never change during PE fine-tuning."""
    return plan.frozen


def build_adapter_plan(vit: ViTConfig, ila: IlaConfig, seed: int = 0, dtype=np.float64) -> AdapterPlan:
    """Place and initialise adapters for ``ila.variant`` on a ``vit`` backbone."""
    grids = grid_chain(vit, ila)
    rng = np.random.default_rng([seed, 1])
    d = vit.hidden_dim
    hidden = ila.bottleneck(vit)
    placements: list[Placement] = []
    if ila.variant is not Variant.NONE:
        plain = plain_ila_layers(vit.depth) if ila.variant is Variant.ILA_PLUS else []
        ds_layers = vit.group_boundaries
        for layer in range(1, vit.depth + 1):
            if ila.variant is Variant.ILA_PLUS_PLUS:
                for site in ("attn", "mlp"):
                    placements.append(
                        Placement(layer, AdapterKind.INTRA_LAYER, f"intra{layer}.{site}",
                                  _intra_params(d, ila.intra_dim(vit), rng, dtype))
                    )
            if layer in plain:
                params, buffers = _main_branch_params(d, hidden, ila.plain_kernel_size, rng, dtype)
                params["rsds.gate"] = init_near_ones((d,), ila.near_ones_std, rng=rng, dtype=dtype)
                placements.append(Placement(layer, AdapterKind.PLAIN_ILA, f"plain{layer}", params, buffers))
            if layer in ds_layers:
                params, buffers = _main_branch_params(d, hidden, ila.kernel_size, rng, dtype)
                params.update(_rsds_params(d, ila, rng, dtype))
                placements.append(Placement(layer, AdapterKind.DOWNSAMPLING_ILA, f"ila{layer}", params, buffers))
    frozen = frozenset(n for n in backbone_shapes(vit) if not n.startswith(TRAINABLE_BACKBONE_PREFIXES))
    return AdapterPlan(vit, ila, placements, frozen, grids)


# ---------------------------------------------------------------- forward


def _cls_channel_path(cls: Tensor, p: dict[str, Tensor]) -> Tensor:
    h = linear(cls, transpose(p["cds.weight"], (1, 0)), p["cds.bias"])
    h = gelu(h)
    h = linear(h, transpose(p["pw.weight"], (1, 0)), p["pw.bias"])
    return linear(h, transpose(p["cus.weight"], (1, 0)), p["cus.bias"])


def _main_branch(
    seq: TokenSequence, p: dict[str, Tensor], buffers: dict[str, np.ndarray],
    stride: int, padding: int, training: bool,
) -> TokenSequence:
    grid = seq.spatial_grid()
    h = pointwise_conv2d(grid, p["cds.weight"], p["cds.bias"])
    h = depthwise_conv2d(h, p["dw.weight"], stride=stride, padding=padding)
    h = batch_norm(
        h, p["bn.weight"], p["bn.bias"], buffers["bn.running_mean"], buffers["bn.running_var"],
        training=training, momentum=BN_MOMENTUM, eps=BN_EPS,
    )
    h = gelu(h)
    h = pointwise_conv2d(h, p["pw.weight"], p["pw.bias"])
    h = pointwise_conv2d(h, p["cus.weight"], p["cus.bias"])
    return TokenSequence.from_parts(_cls_channel_path(seq.cls, p), h)


def sds_main_forward(
    seq: TokenSequence, params: dict[str, Tensor], buffers: dict[str, np.ndarray],
    cfg: IlaConfig, training: bool = True,
) -> TokenSequence:
    """Main down-sampling branch; output grid is ``(g - K) // S + 1``."""
    if seq.grid_side < cfg.kernel_size:
        raise ConfigError(f"grid {seq.grid_side} smaller than kernel {cfg.kernel_size}")
    return _main_branch(seq, params, buffers, cfg.stride, 0, training)


def rsds_forward(seq: TokenSequence, params: dict[str, Tensor], cfg: IlaConfig) -> Optional[TokenSequence]:
    """Residual down-sampling branch, or ``None`` when disabled."""
    mode = cfg.rsds_mode
    if mode is RsdsMode.NONE:
        return None
    if seq.grid_side < cfg.kernel_size:
        raise ConfigError(f"grid {seq.grid_side} smaller than kernel {cfg.kernel_size}")
    grid = seq.spatial_grid()
    k, s = cfg.kernel_size, cfg.stride
    if mode is RsdsMode.AVG_POOL:
        pool = Tensor(np.full((seq.dim, k, k), 1.0 / (k * k), dtype=grid.dtype))
        return TokenSequence.from_parts(seq.cls, depthwise_conv2d(grid, pool, stride=s))
    if mode is RsdsMode.FULL_CONV:
        out = conv2d(grid, params["rsds.weight"], stride=s)
    else:
        out = depthwise_conv2d(grid, params["rsds.weight"], stride=s)
    return TokenSequence.from_parts(seq.cls * params["rsds.cls_gate"], out)


def ila_forward(
    seq: TokenSequence, params: dict[str, Tensor], buffers: dict[str, np.ndarray],
    cfg: IlaConfig, training: bool = True,
) -> TokenSequence:
    """Sum of the main and residual down-sampling branches."""
    main = sds_main_forward(seq, params, buffers, cfg, training)
    residual = rsds_forward(seq, params, cfg)
    if residual is None:
        return main
    assert main.tokens.shape == residual.tokens.shape, (main.tokens.shape, residual.tokens.shape)
    return TokenSequence(main.tokens + residual.tokens, main.grid_side)


def plain_ila_forward(
    seq: TokenSequence, params: dict[str, Tensor], buffers: dict[str, np.ndarray],
    cfg: IlaConfig, training: bool = True,
) -> TokenSequence:
    """Grid-preserving adapter: padded stride-1 main branch plus a K=1 residual gate."""
    k = cfg.plain_kernel_size
    if k % 2 == 0:
        raise ConfigError(f"plain adapters need an odd kernel, got {k}")
    main = _main_branch(seq, params, buffers, 1, (k - 1) // 2, training)
    residual = seq.tokens * params["rsds.gate"]
    return TokenSequence(main.tokens + residual, seq.grid_side)


def intra_layer_adapter_forward(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Bottleneck MLP with residual: ``x + up(gelu(down(x)))``."""
    h = gelu(linear(x, params["down.weight"], params["down.bias"]))
    return x + linear(h, params["up.weight"], params["up.bias"])


def intra_layer_param_count(d: int, a: int) -> int:
    return 2 * d * a + d + a

