"""Finite-difference gradient cases shared by the unit and acceptance tests.

Every case builds double-precision inputs from a fixed seed and returns
``(loss_fn, tensors)``; the loss is a random projection of the op output so
that every output entry contributes.
"""

from __future__ import annotations

import numpy as np

from ila_lab.autodiff import Tensor, matmul
from ila_lab.gradcheck import check_gradients
from ila_lab.ila import (
    IlaConfig,
    RsdsMode,
    Variant,
    build_adapter_plan,
    ila_forward,
    intra_layer_adapter_forward,
    plain_ila_forward,
    rsds_forward,
    sds_main_forward,
)
from ila_lab.model import build_model, vit_forward
from ila_lab.ops import (
    batch_norm,
    conv2d,
    cross_entropy_loss,
    depthwise_conv2d,
    gelu,
    layer_norm,
    pointwise_conv2d,
    softmax,
)
from ila_lab.vit import TokenSequence, ViTConfig, init_backbone, mhsa_forward, pwffn_forward

TOL = 1e-5
LOOSE_TOL = 1e-4  # batch-norm train mode and the end-to-end model
MAX_ENTRIES = 48

TINY_VIT = ViTConfig(image_size=8, patch_size=4, depth=3, hidden_dim=16, num_heads=2, num_classes=5)


def _leaf(rng, shape, scale=1.0, shift=0.0):
    return Tensor(rng.standard_normal(shape) * scale + shift, requires_grad=True)


def _projection(rng, out):
    r = Tensor(rng.standard_normal(out.shape))
    return lambda y: (y * r).sum()


def _op_case(rng, fn, inputs):
    proj = _projection(rng, fn())
    return lambda: proj(fn()), inputs


def _randomize(params, rng, scale=0.3):
    for t in params.values():
        t.data = t.data + scale * rng.standard_normal(t.shape)


def _seq(rng, b=2, g=4, d=8):
    return TokenSequence(_leaf(rng, (b, g * g + 1, d)), g)


def case_matmul(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    return _op_case(rng, lambda: matmul(a, b), {"a": a, "b": b})


def case_depthwise(rng):
    x, w = _leaf(rng, (2, 3, 6, 6)), _leaf(rng, (3, 3, 3))
    return _op_case(rng, lambda: depthwise_conv2d(x, w, stride=2, padding=1), {"x": x, "w": w})


def case_pointwise(rng):
    x, w, b = _leaf(rng, (2, 4, 3, 3)), _leaf(rng, (5, 4)), _leaf(rng, (5,))
    return _op_case(rng, lambda: pointwise_conv2d(x, w, b), {"x": x, "w": w, "b": b})


def case_full_conv(rng):
    x, w = _leaf(rng, (2, 3, 5, 5)), _leaf(rng, (4, 3, 2, 2))
    return _op_case(rng, lambda: conv2d(x, w, stride=1), {"x": x, "w": w})


def case_batch_norm_train(rng):
    x, g, b = _leaf(rng, (3, 4, 3, 3), 2.0, 1.0), _leaf(rng, (4,), 0.5, 1.0), _leaf(rng, (4,))
    rm, rv = np.zeros(4), np.ones(4)
    return _op_case(rng, lambda: batch_norm(x, g, b, rm, rv, training=True), {"x": x, "gamma": g, "beta": b})


def case_batch_norm_eval(rng):
    x, g, b = _leaf(rng, (3, 4, 3, 3)), _leaf(rng, (4,), 0.5, 1.0), _leaf(rng, (4,))
    rm, rv = rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)
    return _op_case(rng, lambda: batch_norm(x, g, b, rm, rv, training=False), {"x": x, "gamma": g, "beta": b})


def case_layer_norm(rng):
    x, g, b = _leaf(rng, (2, 3, 6), 2.0, 0.5), _leaf(rng, (6,), 0.5, 1.0), _leaf(rng, (6,))
    return _op_case(rng, lambda: layer_norm(x, g, b), {"x": x, "gamma": g, "beta": b})


def case_gelu(rng):
    x = _leaf(rng, (4, 5), 2.0)
    return _op_case(rng, lambda: gelu(x), {"x": x})


def case_softmax(rng):
    x = _leaf(rng, (3, 6), 2.0)
    return _op_case(rng, lambda: softmax(x, axis=-1), {"x": x})


def case_cross_entropy(rng):
    x = _leaf(rng, (4, 5), 2.0)
    labels = [0, 4, 1, 1]
    return lambda: cross_entropy_loss(x, labels), {"logits": x}


def _adapter_case(rng, cfg, forward, kind_prefix):
    vit = ViTConfig(image_size=32, patch_size=4, depth=6, hidden_dim=8, num_heads=2, num_classes=3)
    plan = build_adapter_plan(vit, cfg, seed=0)
    placement = next(p for p in plan.placements if p.name.startswith(kind_prefix))
    _randomize(placement.params, rng)
    seq = _seq(rng, g=4, d=8)
    proj = _projection(rng, forward(seq, placement).tokens)
    tensors = {"tokens": seq.tokens, **placement.params}
    return lambda: proj(forward(seq, placement).tokens), tensors


def case_sds_main(rng):
    cfg = IlaConfig(bottleneck_dim=3)
    return _adapter_case(rng, cfg, lambda s, p: sds_main_forward(s, p.params, p.buffers, cfg), "ila")


def _rsds_case(mode):
    def case(rng):
        cfg = IlaConfig(bottleneck_dim=3, rsds_mode=mode)
        return _adapter_case(rng, cfg, lambda s, p: rsds_forward(s, {k: v for k, v in p.params.items() if k.startswith("rsds")}, cfg), "ila")

    return case


def case_ila(rng):
    cfg = IlaConfig(bottleneck_dim=3, kernel_size=2, stride=2)
    return _adapter_case(rng, cfg, lambda s, p: ila_forward(s, p.params, p.buffers, cfg), "ila")


def case_plain_ila(rng):
    cfg = IlaConfig(variant=Variant.ILA_PLUS, bottleneck_dim=3)
    return _adapter_case(rng, cfg, lambda s, p: plain_ila_forward(s, p.params, p.buffers, cfg), "plain")


def case_intra_adapter(rng):
    cfg = IlaConfig(variant=Variant.ILA_PLUS_PLUS, intra_adapter_dim=3)
    vit = ViTConfig(image_size=32, patch_size=4, depth=3, hidden_dim=8, num_heads=2, num_classes=3)
    plan = build_adapter_plan(vit, cfg, seed=0)
    params = plan.intra(1)["attn"].params
    _randomize(params, rng)
    x = _leaf(rng, (2, 5, 8))
    return _op_case(rng, lambda: intra_layer_adapter_forward(x, params), {"x": x, **params})


def _block_case(forward):
    def case(rng):
        vit = ViTConfig(image_size=8, patch_size=4, depth=3, hidden_dim=8, num_heads=2, num_classes=3)
        params = init_backbone(vit, rng)
        block = {n: t for n, t in params.items() if n.startswith("blocks.0.")}
        for t in block.values():
            t.requires_grad = True
        _randomize(block, rng, 0.2)
        seq = _seq(rng, g=2, d=8)
        return _op_case(rng, lambda: forward(seq, params, vit).tokens, {"tokens": seq.tokens, **block})

    return case


def _end_to_end(variant, all_backbone):
    def case(rng):
        ila = IlaConfig(variant=variant, kernel_size=1, bottleneck_dim=3, intra_adapter_dim=3)
        model = build_model(TINY_VIT, ila, seed=0, dtype=np.float64)
        if all_backbone:
            for t in model.params.values():
                t.requires_grad = True
        tensors = model.trainable()
        adapters = {n: t for n, t in tensors.items() if n.startswith("adapters.")}
        _randomize(adapters, rng)
        _randomize({n: model.params[n] for n in ("head.weight",)}, rng, 0.5)
        images = Tensor(rng.standard_normal((3, 3, 8, 8)))
        labels = [0, 3, 4]
        return lambda: cross_entropy_loss(vit_forward(images, model), labels), tensors

    return case


# name -> (builder, tolerance); end-to-end cases share one gradient scale
# because the K=1 depthwise weight in front of train-mode batch-norm has a
# vanishing true gradient
CASES = {
    "matmul": (case_matmul, TOL),
    "depthwise_conv2d": (case_depthwise, TOL),
    "pointwise_conv2d": (case_pointwise, TOL),
    "conv2d": (case_full_conv, TOL),
    "batch_norm_train": (case_batch_norm_train, LOOSE_TOL),
    "batch_norm_eval": (case_batch_norm_eval, TOL),
    "layer_norm": (case_layer_norm, TOL),
    "gelu": (case_gelu, TOL),
    "softmax": (case_softmax, TOL),
    "cross_entropy": (case_cross_entropy, TOL),
    "sds_main": (case_sds_main, LOOSE_TOL),  # contains batch-norm in train mode
    "rsds_near_ones": (_rsds_case(RsdsMode.DWC_NEAR_ONES), TOL),
    "rsds_normal": (_rsds_case(RsdsMode.DWC_NORMAL), TOL),
    "rsds_conv": (_rsds_case(RsdsMode.FULL_CONV), TOL),
    "ila": (case_ila, LOOSE_TOL),
    "plain_ila": (case_plain_ila, LOOSE_TOL),
    "intra_adapter": (case_intra_adapter, TOL),
    "mhsa_block": (_block_case(lambda s, p, v: mhsa_forward(s, p, 0, v.num_heads)), TOL),
    "pwffn_block": (_block_case(lambda s, p, v: pwffn_forward(s, p, 0)), TOL),
    "vit_ila++_trainable": (_end_to_end(Variant.ILA_PLUS_PLUS, False), LOOSE_TOL),
    "vit_vanilla_all_tensors": (_end_to_end(Variant.NONE, True), LOOSE_TOL),
}


def run_case(name: str) -> tuple[float, float]:
    """(max relative error over the case's tensors, tolerance)."""
    builder, tol = CASES[name]
    loss_fn, tensors = builder(np.random.default_rng(_stable_seed(name)))
    errors = check_gradients(loss_fn, tensors, eps=1e-6, max_entries=MAX_ENTRIES, shared_scale=name.startswith("vit_"))
    return max(errors.values()), tol


def _stable_seed(name: str) -> int:
    return sum((i + 1) * ord(c) for i, c in enumerate(name))
