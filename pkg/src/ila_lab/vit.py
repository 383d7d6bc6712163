"""Vision Transformer backbone: patch embedding, pre-norm encoder blocks, head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .autodiff import Tensor, broadcast_to, concat, matmul, reshape, transpose
from .errors import ConfigError
from .ops import gelu, layer_norm, linear, softmax

ParamDict = dict[str, Tensor]

#: Name prefixes of backbone tensors that stay trainable in the PE setting.
TRAINABLE_BACKBONE_PREFIXES = ("head.", "norm.")


class ViTConfig(BaseModel):
    """Backbone geometry. Defaults are ViT-B/16 at 224 px."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    image_size: int = 224
    patch_size: int = 16
    depth: int = 12
    hidden_dim: int = 768
    num_heads: int = 12
    mlp_ratio: int = 4
    num_classes: int = 200

    @model_validator(mode="after")
    def _check(self) -> "ViTConfig":
        for name in ("image_size", "patch_size", "depth", "hidden_dim", "num_heads", "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.depth % 3:
            raise ValueError(f"depth {self.depth} must split into three equal encoder groups")
        return self

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return self.hidden_dim * self.mlp_ratio

    @property
    def group_boundaries(self) -> tuple[int, int]:
        """Layers (1-based) after which the first two encoder groups end."""
        return self.depth // 3, 2 * self.depth // 3


@dataclass
class TokenSequence:
    """CLS token at index 0 followed by ``grid_side**2`` spatial tokens."""

    tokens: Tensor
    grid_side: int

    def __post_init__(self) -> None:
        n = self.tokens.shape[1] - 1
        if self.tokens.ndim != 3 or n != self.grid_side**2:
            raise AssertionError(
                f"token grid invariant violated: {n} spatial tokens for grid side {self.grid_side}"
            )

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def cls(self) -> Tensor:
        return self.tokens[:, :1, :]

    @property
    def spatial(self) -> Tensor:
        return self.tokens[:, 1:, :]

    def spatial_grid(self) -> Tensor:
        """Spatial tokens as a ``[B, D, g, g]`` feature map."""
        g = self.grid_side
        return reshape(transpose(self.spatial, (0, 2, 1)), (self.batch, self.dim, g, g))

    @classmethod
    def from_parts(cls_, cls_token: Tensor, grid: Tensor) -> "TokenSequence":
        """Reassemble a sequence from ``[B, 1, D]`` CLS and ``[B, D, g, g]`` grid."""
        b, d, g, _ = grid.shape
        spatial = transpose(reshape(grid, (b, d, g * g)), (0, 2, 1))
        return cls_(concat([cls_token, spatial], axis=1), g)


@dataclass
class AttentionRecord:
    """Attention probabilities ``[B, heads, N_l+1, N_l+1]`` captured per layer."""

    layers: list[np.ndarray] = field(default_factory=list)

    def append(self, probs: np.ndarray) -> None:
        self.layers.append(np.array(probs, copy=True))

    def __len__(self) -> int:
        return len(self.layers)


# ---------------------------------------------------------------- parameters


def backbone_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, p = cfg.hidden_dim, cfg.patch_size
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, 3, p, p),
        "patch_embed.bias": (d,),
        "cls_token": (1, 1, d),
        "pos_embed": (1, cfg.num_patches + 1, d),
    }
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        shapes.update(
            {
                pre + "norm1.weight": (d,),
                pre + "norm1.bias": (d,),
                pre + "attn.qkv.weight": (d, 3 * d),
                pre + "attn.qkv.bias": (3 * d,),
                pre + "attn.proj.weight": (d, d),
                pre + "attn.proj.bias": (d,),
                pre + "norm2.weight": (d,),
                pre + "norm2.bias": (d,),
                pre + "mlp.fc1.weight": (d, cfg.mlp_dim),
                pre + "mlp.fc1.bias": (cfg.mlp_dim,),
                pre + "mlp.fc2.weight": (cfg.mlp_dim, d),
                pre + "mlp.fc2.bias": (d,),
            }
        )
    shapes.update(
        {
            "norm.weight": (d,),
            "norm.bias": (d,),
            "head.weight": (d, cfg.num_classes),
            "head.bias": (cfg.num_classes,),
        }
    )
    return shapes


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std^2) truncated to two standard deviations (by resampling)."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_backbone(cfg: ViTConfig, rng: np.random.Generator, dtype=np.float64) -> ParamDict:
    """Truncated-normal weights, zero biases, unit LayerNorm scales."""
    params: ParamDict = {}
    for name, shape in backbone_shapes(cfg).items():
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
            data = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = trunc_normal(rng, shape, dtype=dtype)
        trainable = name.startswith(TRAINABLE_BACKBONE_PREFIXES)
        params[name] = Tensor(data, requires_grad=trainable, name=name)
    return params


# ---------------------------------------------------------------- forward


def patchify_embed(images: Tensor, cfg: ViTConfig, params: ParamDict) -> TokenSequence:
    """Non-overlapping PxP patch projection, CLS prepend, positional embedding."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ConfigError(f"expected images [B, 3, H, W], got {images.shape}")
    b, _, h, w = images.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    if h != cfg.image_size or w != cfg.image_size:
        raise ConfigError(f"image {h}x{w} does not match configured size {cfg.image_size}")
    gh, gw = h // p, w // p
    patches = reshape(images, (b, 3, gh, p, gw, p))
    patches = reshape(transpose(patches, (0, 2, 4, 1, 3, 5)), (b, gh * gw, 3 * p * p))
    kernel = transpose(reshape(params["patch_embed.weight"], (cfg.hidden_dim, 3 * p * p)), (1, 0))
    x = linear(patches, kernel, params["patch_embed.bias"])
    cls = broadcast_to(params["cls_token"], (b, 1, cfg.hidden_dim))
    x = concat([cls, x], axis=1) + params["pos_embed"]
    return TokenSequence(x, gh)


def attention_branch(
    x: Tensor, params: ParamDict, layer: int, num_heads: int, capture: Optional[AttentionRecord] = None
) -> Tensor:
    """Pre-norm multi-head self-attention without the residual add."""
    pre = f"blocks.{layer}."
    b, n, d = x.shape
    dh = d // num_heads
    h = layer_norm(x, params[pre + "norm1.weight"], params[pre + "norm1.bias"])
    qkv = linear(h, params[pre + "attn.qkv.weight"], params[pre + "attn.qkv.bias"])
    qkv = transpose(reshape(qkv, (b, n, 3, num_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    q = q * (1.0 / math.sqrt(dh))
    attn = softmax(matmul(q, transpose(k, (0, 1, 3, 2))), axis=-1)
    if capture is not None:
        capture.append(attn.data)
    out = transpose(matmul(attn, v), (0, 2, 1, 3))
    out = reshape(out, (b, n, d))
    return linear(out, params[pre + "attn.proj.weight"], params[pre + "attn.proj.bias"])


def mlp_branch(x: Tensor, params: ParamDict, layer: int) -> Tensor:
    """Pre-norm position-wise feed-forward network without the residual add."""
    pre = f"blocks.{layer}."
    h = layer_norm(x, params[pre + "norm2.weight"], params[pre + "norm2.bias"])
    h = gelu(linear(h, params[pre + "mlp.fc1.weight"], params[pre + "mlp.fc1.bias"]))
    return linear(h, params[pre + "mlp.fc2.weight"], params[pre + "mlp.fc2.bias"])


def mhsa_forward(
    seq: TokenSequence,
    params: ParamDict,
    layer: int,
    num_heads: int,
    capture: Optional[AttentionRecord] = None,
) -> TokenSequence:
    out = seq.tokens + attention_branch(seq.tokens, params, layer, num_heads, capture)
    return TokenSequence(out, seq.grid_side)


def pwffn_forward(seq: TokenSequence, params: ParamDict, layer: int) -> TokenSequence:
    return TokenSequence(seq.tokens + mlp_branch(seq.tokens, params, layer), seq.grid_side)


SublayerHook = Callable[[Tensor, str], Tensor]


def encoder_block_forward(
    seq: TokenSequence,
    params: ParamDict,
    layer: int,
    cfg: ViTConfig,
    capture: Optional[AttentionRecord] = None,
    sublayer_hook: Optional[SublayerHook] = None,
) -> TokenSequence:
    """MHSA then PWFFN, each residual.

    ``sublayer_hook(branch_out, site)`` lets intra-layer adapters transform a
    branch output (site ``"attn"`` or ``"mlp"``) before its residual add.
    """
    x = seq.tokens
    a = attention_branch(x, params, layer, cfg.num_heads, capture)
    if sublayer_hook is not None:
        a = sublayer_hook(a, "attn")
    x = x + a
    m = mlp_branch(x, params, layer)
    if sublayer_hook is not None:
        m = sublayer_hook(m, "mlp")
    return TokenSequence(x + m, seq.grid_side)


def classify_head(seq: TokenSequence, params: ParamDict) -> Tensor:
    """Final LayerNorm on the CLS token followed by a linear classifier."""
    cls = reshape(seq.cls, (seq.batch, seq.dim))
    cls = layer_norm(cls, params["norm.weight"], params["norm.bias"])
    return linear(cls, params["head.weight"], params["head.bias"])
