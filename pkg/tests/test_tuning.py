from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xptlab import checkpoint as ck
from xptlab.errors import ContractError, InputError
from xptlab.synthlang import MultilingualDataset
from xptlab.tuning import (FINETUNE, PROMPTTUNE, AdamState, Hyper, adam_step, evaluate, linear_lr, select_lr,
                           train, trainable_names)


def quick(mode, **kw):
    base = dict(mode=mode, lr=1e-2, epochs=1, prompt_length=2, batch_size=16, test_every=0)
    base.update(kw)
    return Hyper(**base)


# --- Adam -----------------------------------------------------------------------


def test_adam_zero_gradient_is_fixed_point():
    params = {"w": np.array([1.0, -2.0]), "frozen": np.array([3.0])}
    state = AdamState.zeros(params, ["w"])
    out = adam_step(params, {"w": np.zeros(2)}, state, 0.1)
    assert out["w"].tobytes() == params["w"].tobytes()
    assert out["frozen"] is params["frozen"]
    assert state.t == 1


def test_adam_first_step_is_minus_lr():
    params = {"x": np.array([0.0])}
    state = AdamState.zeros(params, ["x"])
    out = adam_step(params, {"x": np.array([1.0])}, state, 0.01)
    assert out["x"][0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_converges_on_quadratic():
    params = {"x": np.array([5.0])}
    state = AdamState.zeros(params, ["x"])
    for _ in range(100):
        params = adam_step(params, {"x": 2.0 * params["x"]}, state, 0.1)
    assert abs(params["x"][0]) < 0.5
    assert state.t == 100


def test_adam_shape_and_name_errors():
    params = {"w": np.zeros(3)}
    state = AdamState.zeros(params, ["w"])
    with pytest.raises(ContractError):
        adam_step(params, {"w": np.zeros(4)}, state, 0.1)
    with pytest.raises(ContractError):
        adam_step(params, {"v": np.zeros(3)}, state, 0.1)


def test_adam_matches_textbook_update():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(3, 4))
    params = {"w": p0.copy()}
    state = AdamState.zeros(params, ["w"])
    m = np.zeros_like(p0)
    v = np.zeros_like(p0)
    ref = p0.copy()
    for t in range(1, 6):
        g = rng.normal(size=p0.shape)
        params = adam_step(params, {"w": g}, state, 0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["w"], ref, rtol=1e-12, atol=1e-15)


# --- schedule ---------------------------------------------------------------------


def test_linear_lr_endpoints():
    assert linear_lr(0, 10, 0.3) == 0.3
    assert linear_lr(10, 10, 0.3) == 0.0
    assert linear_lr(5, 10, 0.3) == pytest.approx(0.15, rel=1e-15)
    with pytest.raises(ContractError):
        linear_lr(11, 10, 0.3)
    with pytest.raises(ContractError):
        linear_lr(0, 0, 0.3)


@given(total=st.integers(1, 10_000), base=st.floats(1e-6, 1.0))
def test_linear_lr_non_increasing_closed_form(total, base):
    steps = np.linspace(0, total, num=min(total + 1, 50)).astype(int)
    vals = [linear_lr(int(s), total, base) for s in steps]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    for s, v in zip(steps, vals):
        assert v == base * (1 - s / total)


# --- hyperparameters --------------------------------------------------------------


def test_hyper_validation_and_round_trip():
    with pytest.raises(ContractError):
        Hyper(mode="lora")
    with pytest.raises(ContractError):
        Hyper(lr=0.0)
    with pytest.raises(ContractError):
        Hyper(epochs=0)
    h = Hyper(mode=FINETUNE, lr_grid=(1e-3, 1e-4), seed=7)
    assert Hyper.from_dict(h.to_dict()) == h


# --- training ---------------------------------------------------------------------


def test_prompt_tuning_keeps_backbone_bytes(tiny_model, tiny_data):
    before = ck.backbone_bytes(tiny_model)
    ckpt, hist = train(tiny_model, tiny_data, quick(PROMPTTUNE))
    assert ck.backbone_bytes(ckpt.params) == before
    assert hist.backbone_checksum_before == hist.backbone_checksum_after
    assert ckpt.prompt is not None and ckpt.prompt.length == 2
    assert ck.backbone_bytes(tiny_model) == before  # input untouched


def test_finetune_changes_backbone(tiny_model, tiny_data):
    ckpt, hist = train(tiny_model, tiny_data, quick(FINETUNE))
    assert hist.steps >= 1
    assert ck.backbone_bytes(ckpt.params) != ck.backbone_bytes(tiny_model)
    assert ckpt.prompt is None


def test_training_is_seed_deterministic(tiny_model, tiny_data):
    a, ha = train(tiny_model, tiny_data, quick(PROMPTTUNE, epochs=2, test_every=1))
    b, hb = train(tiny_model, tiny_data, quick(PROMPTTUNE, epochs=2, test_every=1))
    assert ck.to_bytes(a) == ck.to_bytes(b)
    assert ha.train_loss == hb.train_loss and ha.test_acc == hb.test_acc
    c, _ = train(tiny_model, tiny_data, quick(PROMPTTUNE, epochs=2, seed=1))
    assert ck.to_bytes(c) != ck.to_bytes(a)


def test_history_records_every_epoch(tiny_model, tiny_data):
    _, hist = train(tiny_model, tiny_data, quick(FINETUNE, epochs=3, test_every=2))
    assert hist.epochs_run == 3 and len(hist.val_acc) == 3
    assert sorted(hist.test_acc) == [2, 3]
    assert set(hist.test_acc[3]) == set(tiny_data.lang_ids)
    assert 0.0 <= hist.final_train_acc <= 1.0


@pytest.mark.parametrize("mode", [FINETUNE, PROMPTTUNE])
def test_trainable_set_matches_ratio(tiny_model, tiny_data, mode):
    ckpt, _ = train(tiny_model, tiny_data, quick(mode))
    names = trainable_names(ckpt.params, mode, ckpt.prompt)
    if mode == PROMPTTUNE:
        assert set(names) == set(ckpt.prompt.named()) | {"head.w", "head.b"}
        tuned = ckpt.prompt.count() + ckpt.params.count(ckpt.params.head_names)
        total = ckpt.params.count() + ckpt.prompt.count()
        assert ckpt.ratios()["prompt_and_head"] == tuned / total
    else:
        assert set(names) == set(ckpt.params.arrays)


def test_empty_train_split_is_input_error(tiny_model, tiny_data):
    no_train = MultilingualDataset([s for s in tiny_data.samples if s.split != "train"], tiny_data.languages)
    with pytest.raises(InputError):
        train(tiny_model, no_train, quick(FINETUNE))


# --- learning-rate selection ------------------------------------------------------


def test_select_lr_singleton(tiny_model, tiny_data):
    best, _ = select_lr(tiny_model, tiny_data, quick(FINETUNE, lr_grid=(3e-3,)))
    assert best == 3e-3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_select_lr_skips_diverged_probe(tiny_model, tiny_data):
    best, scores = select_lr(tiny_model, tiny_data, quick(FINETUNE, lr_grid=(1e10, 1e-3), probe_epochs=1))
    assert scores[1e10] == -math.inf
    assert best == 1e-3


def test_select_lr_reproducible_and_tie_breaks_small(tiny_model, tiny_data):
    h = quick(PROMPTTUNE, lr_grid=(5e-2, 1e-2, 1e-3), probe_epochs=1)
    a = select_lr(tiny_model, tiny_data, h)
    b = select_lr(tiny_model, tiny_data, h)
    assert a == b
    best, scores = a
    top = max(scores.values())
    assert best == min(lr for lr, s in scores.items() if s == top)


# --- evaluation -------------------------------------------------------------------


def test_constant_classifier_scores_half(tiny_model, tiny_data):
    p = tiny_model.copy()
    p.arrays["head.w"][:] = 0.0
    p.arrays["head.b"][:] = [1.0, 0.0]
    scores = evaluate(p, None, tiny_data)
    assert all(v == 0.5 for v in scores.values())
    assert evaluate(p, None, tiny_data) == scores


def test_oracle_labels_score_one(tiny_model, tiny_data):
    p = tiny_model.copy()
    p.arrays["head.w"][:] = 0.0
    p.arrays["head.b"][:] = [1.0, 0.0]
    zeros = MultilingualDataset([s for s in tiny_data.samples if s.label == 0], tiny_data.languages)
    assert all(v == 1.0 for v in evaluate(p, None, zeros).values())


def test_evaluate_unknown_language(tiny_model, tiny_data):
    with pytest.raises(InputError):
        evaluate(tiny_model, None, tiny_data, langs=[9])


def test_finetune_fits_small_training_set(tiny_model, tiny_data):
    _, hist = train(tiny_model, tiny_data, quick(FINETUNE, epochs=10))
    assert hist.train_acc[-1] >= 0.95


def test_prompt_tuning_reduces_training_loss(tiny_model, tiny_data):
    _, hist = train(tiny_model, tiny_data, quick(PROMPTTUNE, lr=5e-2, prompt_length=4, epochs=20))
    assert hist.train_loss[-1] < 0.85 * hist.train_loss[0]
