import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from ila_lab.autodiff import Tensor, no_grad
from ila_lab.data import Split, SyntheticSpec, generate_synthetic
from ila_lab.desk import DESK_VIT
from ila_lab.errors import ConfigError, DivergenceError, UsageError
from ila_lab.ila import IlaConfig, Variant
from ila_lab.model import build_model, vit_forward
from ila_lab.ops import cross_entropy_loss
from ila_lab.train import (
    TrainConfig,
    cosine_warmup_lr,
    eval_images,
    evaluate_top1,
    lr_search,
    search_config,
    sgd_momentum_step,
    stratified_split,
    top1,
    train_model,
)
from ila_lab.vit import ViTConfig

SMALL = ViTConfig(image_size=16, patch_size=4, depth=3, hidden_dim=16, num_heads=2, num_classes=4)
SMALL_ILA = IlaConfig(kernel_size=2, bottleneck_dim=4)
SMALL_DATA = SyntheticSpec(num_classes=4, samples_per_class_train=4, samples_per_class_test=2, image_size=16, inter_class_scale=0.3)
QUICK = TrainConfig(base_lr=0.03, epochs=2, warmup_steps=2, batch_size=4, dtype="float64")


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic(SMALL_DATA)


# ---------------------------------------------------------------- optimiser and schedule


def test_sgd_momentum_hand_iteration():
    w = Tensor(np.array([1.0]), requires_grad=True)
    state = {}
    w.grad = np.array([1.0])
    sgd_momentum_step({"w": w}, state, lr=0.1, momentum=0.9)
    assert state["w"][0] == 1.0 and w.data[0] == pytest.approx(0.9, abs=1e-15)
    w.grad = np.array([1.0])
    sgd_momentum_step({"w": w}, state, lr=0.1, momentum=0.9)
    assert state["w"][0] == pytest.approx(1.9, abs=1e-15) and w.data[0] == pytest.approx(0.71, abs=1e-15)


def test_sgd_skips_frozen_and_requires_grads():
    frozen = Tensor(np.array([2.0]))
    frozen.grad = np.array([5.0])
    sgd_momentum_step({"f": frozen}, {}, lr=1.0, momentum=0.9)
    assert frozen.data[0] == 2.0
    with pytest.raises(UsageError):
        sgd_momentum_step({"w": Tensor(np.array([1.0]), requires_grad=True)}, {}, lr=0.1, momentum=0.9)


def test_cosine_anchor_points():
    assert cosine_warmup_lr(0, 0.1, 500, 2000) == 0.0
    assert cosine_warmup_lr(500, 0.1, 500, 2000) == 0.1
    assert abs(cosine_warmup_lr(2000, 0.1, 500, 2000)) <= 1e-12
    assert cosine_warmup_lr(250, 0.1, 500, 2000) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        cosine_warmup_lr(2001, 0.1, 500, 2000)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-4, 1.0), st.integers(0, 50), st.integers(1, 500), st.data())
def test_lr_is_bounded(base, warmup, extra, data):
    total = warmup + extra
    step = data.draw(st.integers(0, total))
    lr = cosine_warmup_lr(step, base, warmup, total)
    assert 0.0 <= lr <= base


def test_train_config_invariants():
    with pytest.raises(ValidationError):
        TrainConfig(lr_grid=())
    with pytest.raises(ValidationError):
        TrainConfig(momentum=1.0)
    cfg = TrainConfig()
    assert (cfg.momentum, cfg.batch_size, cfg.warmup_steps, cfg.epochs) == (0.9, 8, 500, 50)
    assert cfg.lr_grid == (0.3, 0.1, 0.03, 0.01, 0.003)
    assert cfg.total_steps(200) == 50 * 25


# ---------------------------------------------------------------- evaluation


def test_top1_examples(rng):
    labels = np.array([2, 0, 1])
    assert top1(np.eye(3)[labels], labels) == 100.0
    assert top1(np.array([[0.0, 1.0]]), np.array([0])) == 0.0
    assert top1(np.zeros((1, 4)), np.array([0])) == 100.0  # ties go to the lowest index
    with pytest.raises(UsageError):
        top1(np.zeros((0, 3)), np.zeros(0, dtype=int))


def test_uniform_random_model_is_chance(rng):
    n, c = 20_000, 10
    acc = top1(rng.uniform(size=(n, c)), rng.integers(0, c, n))
    p = 1 / c
    assert abs(acc / 100 - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_evaluate_top1_with_model(small_data):
    train, test = small_data
    model = build_model(SMALL, IlaConfig(variant=Variant.NONE))
    model.params["head.weight"].data[...] = 0
    model.params["head.bias"].data[...] = 0
    model.params["head.bias"].data[2] = 10.0
    only2 = test.subset(np.flatnonzero(test.labels == 2))
    assert evaluate_top1(model, only2) == 100.0
    assert evaluate_top1(model, test.subset([0])) == 0.0
    with pytest.raises(UsageError):
        evaluate_top1(model, test.subset([]))


# ---------------------------------------------------------------- training loop


def test_zero_epochs_reports_untrained_accuracy(small_data):
    train, test = small_data
    model = build_model(SMALL, SMALL_ILA, dtype="float64")
    before = evaluate_top1(model, test)
    report = train_model(model, train, test, QUICK.model_copy(update={"epochs": 0}))
    assert report.epochs == [] and report.final_eval_top1 == before and report.total_steps == 0


def test_same_seed_same_report(small_data):
    train, test = small_data
    runs = [train_model(build_model(SMALL, SMALL_ILA, dtype="float64"), train, test, QUICK) for _ in range(2)]
    assert runs[0].to_dict() == runs[1].to_dict()
    other = train_model(build_model(SMALL, SMALL_ILA, dtype="float64"), train, test, QUICK.model_copy(update={"seed": 1}))
    assert other.epochs[0].train_loss != runs[0].epochs[0].train_loss
    assert all(0 <= r.eval_top1 <= 100 for r in runs[0].epochs)


def test_frozen_tensors_unchanged_after_training(small_data):
    train, test = small_data
    model = build_model(SMALL, IlaConfig(variant=Variant.ILA_PLUS_PLUS, kernel_size=2, bottleneck_dim=4), dtype="float64")
    frozen = {n: t.data.copy() for n, t in model.frozen().items()}
    trainable = {n: t.data.copy() for n, t in model.trainable().items()}
    train_model(model, train, test, QUICK)
    assert all(np.array_equal(model.params[n].data, v) for n, v in frozen.items())
    assert any(not np.array_equal(model.params[n].data, v) for n, v in trainable.items())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_step(small_data):
    train, test = small_data
    bad = Split(train.images.copy(), train.labels, train.num_classes)
    bad.images[:] = np.inf
    with pytest.raises(DivergenceError, match="step 0"):
        train_model(build_model(SMALL, SMALL_ILA), bad, test, QUICK)


def test_config_errors(small_data):
    train, test = small_data
    with pytest.raises(ConfigError):
        train_model(build_model(SMALL, SMALL_ILA), train, test, QUICK.model_copy(update={"warmup_steps": 100}))
    wrong = build_model(SMALL.model_copy(update={"num_classes": 5}), SMALL_ILA)
    with pytest.raises(ConfigError):
        train_model(wrong, train, test, QUICK)


def test_on_epoch_callback(small_data):
    train, test = small_data
    seen = []
    train_model(build_model(SMALL, SMALL_ILA), train, test, QUICK, on_epoch=seen.append)
    assert [r.epoch for r in seen] == [1, 2]


@pytest.mark.slow
def test_toy_overfit_reaches_full_train_accuracy(desk_backbone):
    spec = SyntheticSpec(num_classes=20, samples_per_class_train=2, samples_per_class_test=1, inter_class_scale=0.5, intra_class_scale=0.0)
    train, _ = generate_synthetic(spec)
    model = build_model(DESK_VIT, IlaConfig(bottleneck_dim=8), backbone=desk_backbone)
    cfg = TrainConfig(base_lr=0.03, warmup_steps=25, epochs=50)
    report = train_model(model, train, train, cfg)
    assert len(report.epochs) == 50
    assert evaluate_top1(model, train) == 100.0


def test_fixed_batch_loss_decreases_over_first_steps(desk_backbone):
    spec = SyntheticSpec(num_classes=20, samples_per_class_train=2, samples_per_class_test=1, inter_class_scale=0.5, intra_class_scale=0.0)
    train, _ = generate_synthetic(spec)
    model = build_model(DESK_VIT, IlaConfig(bottleneck_dim=8), backbone=desk_backbone, dtype="float32")
    x = eval_images(train.subset(np.arange(8)), 32).astype(np.float32)
    y = train.labels[:8]
    params, state = model.trainable(), {}
    losses = []
    for _ in range(11):
        loss = cross_entropy_loss(vit_forward(x, model), y)
        losses.append(loss.item())
        model.zero_grad()
        loss.backward()
        sgd_momentum_step(params, state, 0.03, 0.9)
    assert losses[10] < losses[0]
    assert sum(b < a for a, b in zip(losses, losses[1:])) >= 7


# ---------------------------------------------------------------- learning-rate search


def test_stratified_split_is_80_20_per_class():
    labels = np.repeat(np.arange(4), 10)
    tr, va = stratified_split(labels, 0.2, 0)
    assert len(va) == 8 and np.all(np.bincount(labels[va]) == 2)
    assert not set(tr) & set(va) and len(tr) + len(va) == 40
    assert np.array_equal(va, stratified_split(labels, 0.2, 0)[1])


def test_search_config_scales_warmup():
    cfg = search_config(TrainConfig(), 0.1)
    assert (cfg.base_lr, cfg.epochs, cfg.warmup_steps) == (0.1, 10, 100)


def test_lr_search_decreasing_oracle_picks_smallest(small_data):
    train, _ = small_data
    calls = []

    def run(lr, sub, val):
        calls.append(lr)
        return 100.0 - 100 * lr

    result = lr_search(None, train, TrainConfig(), run=run)
    assert result.chosen_lr == 0.003 and len(calls) == 5 and len(result.rows) == 5
    assert sorted(calls) == sorted(TrainConfig().lr_grid)


def test_lr_search_argmax_and_ties(small_data):
    train, _ = small_data
    scores = {0.3: 10.0, 0.1: 50.0, 0.03: 50.0, 0.01: 20.0, 0.003: 5.0}
    result = lr_search(None, train, TrainConfig(), run=lambda lr, s, v: scores[lr])
    assert result.chosen_lr == 0.03


def test_lr_search_single_grid_runs_once(small_data):
    train, _ = small_data
    made = []

    def factory():
        made.append(1)
        return build_model(SMALL, SMALL_ILA)

    cfg = QUICK.model_copy(update={"lr_grid": (0.05,), "search_epochs": 1, "warmup_steps": 0})
    result = lr_search(factory, train, cfg)
    assert result.chosen_lr == 0.05 and len(made) == 1 and result.rows[0]["status"] == "ok"


def test_lr_search_divergence_handling(small_data):
    train, _ = small_data

    def run(lr, sub, val):
        if lr > 0.05:
            raise DivergenceError(3, float("nan"))
        return 10.0

    result = lr_search(None, train, TrainConfig(), run=run)
    assert result.chosen_lr == 0.003
    assert [r["status"] for r in result.rows].count("diverged at step 3") == 2

    def always(lr, sub, val):
        raise DivergenceError(1, float("inf"))

    with pytest.raises(DivergenceError, match="lr=0.3: diverged at step 1"):
        lr_search(None, train, TrainConfig(), run=always)


def test_lr_search_needs_validation_data():
    tiny = Split(np.zeros((1, 3, 16, 16), dtype=np.float32), np.array([0]), 1)
    with pytest.raises(UsageError):
        lr_search(None, tiny, TrainConfig(), run=lambda *a: 0.0)


def test_predict_restores_mode(small_data):
    _, test = small_data
    model = build_model(SMALL, SMALL_ILA)
    with no_grad():
        evaluate_top1(model, test)
    assert model.training
