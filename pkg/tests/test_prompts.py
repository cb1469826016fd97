from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xptlab.encoder import EncoderParams, ModelConfig, forward
from xptlab.errors import ContractError
from xptlab.prompts import (DeepPrompt, PromptConfig, as_past_kv, from_past_kv, init_prompts, prompt_param_count,
                            tuned_param_ratio)

DESK = ModelConfig()


def test_init_is_deterministic_per_seed():
    a = init_prompts(DESK, PromptConfig(seed=3))
    b = init_prompts(DESK, PromptConfig(seed=3))
    c = init_prompts(DESK, PromptConfig(seed=4))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.keys + a.values, b.keys + b.values))
    assert any(x.tobytes() != y.tobytes() for x, y in zip(a.keys + a.values, c.keys + c.values))


def test_desk_prompt_count():
    dp = init_prompts(DESK, PromptConfig(length=16))
    assert dp.count() == prompt_param_count(4, 16, 64) == 4 * 2 * 16 * 64 == 8192


def test_init_std_statistics():
    cfg = ModelConfig(n_layers=8, n_heads=4, d_model=128)
    dp = init_prompts(cfg, PromptConfig(length=50, init_std=0.02, seed=0))
    draws = np.concatenate([x.ravel() for x in dp.keys + dp.values])
    assert draws.size >= 100_000
    assert abs(draws.std() / 0.02 - 1.0) < 0.05


def test_config_contracts():
    with pytest.raises(ContractError):
        PromptConfig(length=0)
    with pytest.raises(ContractError):
        PromptConfig(init_std=0.0)
    with pytest.raises(ContractError):
        DeepPrompt([np.zeros((2, 4, 16))], [np.zeros((3, 4, 16))])


def test_past_kv_round_trip_and_layers():
    dp = init_prompts(DESK, PromptConfig(length=5))
    past = as_past_kv(dp)
    assert len(past.layers) == DESK.n_layers
    back = from_past_kv(past)
    assert all(np.array_equal(x, y) for x, y in zip(dp.keys + dp.values, back.keys + back.values))
    named = DeepPrompt.from_named(dp.named())
    assert all(np.array_equal(x, y) for x, y in zip(dp.keys, named.keys))


def test_mutating_prompt_after_conversion_does_not_alias():
    params = EncoderParams.init(DESK, 0)
    dp = init_prompts(DESK, PromptConfig(length=4))
    past = as_past_kv(dp)
    toks = np.array([1, 20, 30, 3, 40])
    before = forward(toks, params, past)[1].data.copy()
    for k in dp.keys:
        k += 1.0
    after = forward(toks, params, past)[1].data
    assert before.tobytes() == after.tobytes()


def test_ratio_edge_cases():
    assert tuned_param_ratio(0, 0, 100) == 0.0
    with pytest.raises(ContractError):
        tuned_param_ratio(1, 1, 0)
    with pytest.raises(ContractError):
        tuned_param_ratio(-1, 0, 10)


@pytest.mark.parametrize("p, expected", [(16, 0.0014), (32, 0.0028)])
def test_paper_scale_ratio(p, expected):
    prompt = prompt_param_count(24, p, 1024)
    assert prompt == 24 * 2 * p * 1024
    ratio = tuned_param_ratio(prompt, 0, 560_000_000)
    assert round(ratio, 4) == expected
    assert 0.001 <= ratio <= 0.003


@given(p=st.integers(1, 200), head=st.integers(0, 10_000), backbone=st.integers(1, 10**9))
def test_ratio_increases_with_prompt_length(p, head, backbone):
    a = tuned_param_ratio(prompt_param_count(4, p, 64), head, backbone)
    b = tuned_param_ratio(prompt_param_count(4, p + 1, 64), head, backbone)
    assert b > a
    assert 0.0 < a < 1.0
