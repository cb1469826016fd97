from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xptlab.encoder import EncoderParams, forward
from xptlab.errors import ContractError, InputError
from xptlab.geometry import (UNDEFINED, GapReport, RepMatrix, alignment, collect_reps, cosine, read_reps_csv,
                             rel_diff, rep_change, transfer_gap, write_reps_csv)
from xptlab.prompts import PromptConfig, as_past_kv, init_prompts
from xptlab.synthlang import encode_pair

from reference_values import ALIGNMENT_ROWS, GAP_ROW


def mat(lang, reps, tag="frozen", ids=None):
    reps = np.asarray(reps, dtype=float)
    ids = np.arange(len(reps)) if ids is None else ids
    return RepMatrix(lang, reps, ids, np.arange(len(reps)) % 2, tag)


# --- cosine ---------------------------------------------------------------------


def test_cosine_basic_cases():
    assert cosine([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-15)
    assert cosine([1, 0], [0, 5]) == 0.0
    assert cosine([1, 1], [-1, -1]) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(ContractError):
        cosine([0, 0], [1, 0])
    with pytest.raises(ContractError):
        cosine([1, 0], [1, 0, 0])


@given(arrays(np.float64, 6, elements=st.floats(-10, 10)), arrays(np.float64, 6, elements=st.floats(-10, 10)))
def test_cosine_bounded_and_symmetric(u, v):
    if np.linalg.norm(u) < 1e-6 or np.linalg.norm(v) < 1e-6:
        return
    c = cosine(u, v)
    assert -1.0 <= c <= 1.0 and c == cosine(v, u)


# --- representation change ------------------------------------------------------


def test_rep_change_identity_and_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(20, 5))
    b = a + 0.3 * rng.normal(size=a.shape)
    assert rep_change(mat(1, a), mat(1, a, "finetuned")) == pytest.approx(100.0, abs=1e-12)
    expected = 100 * np.mean([x @ y / (np.linalg.norm(x) * np.linalg.norm(y)) for x, y in zip(a, b)])
    assert rep_change(mat(1, a), mat(1, b, "finetuned")) == pytest.approx(expected, rel=1e-13)


def test_rep_change_matches_rows_by_pair_id():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(6, 3))
    perm = np.array([3, 0, 5, 1, 4, 2])
    shuffled = RepMatrix(0, a[perm], perm, (perm % 2), "prompttuned")
    assert rep_change(mat(0, a), shuffled) == pytest.approx(100.0, abs=1e-12)


def test_rep_change_mismatch_errors():
    a = np.eye(3)
    with pytest.raises(InputError):
        rep_change(mat(0, a), mat(1, a))
    with pytest.raises(InputError):
        rep_change(mat(0, a), mat(0, a, ids=np.array([0, 1, 7])))


def test_rep_matrix_validation():
    with pytest.raises(ContractError):
        RepMatrix(0, np.ones((2, 2)), [0, 0], [0, 1])
    with pytest.raises(ContractError):
        RepMatrix(0, np.array([[np.nan, 1.0]]), [0], [0])
    with pytest.raises(ContractError):
        RepMatrix(0, np.ones((1, 2)), [0], [0], tag="lora")


# --- alignment ------------------------------------------------------------------


def loop_alignment(a, b):
    """Pair-by-pair averages with explicit loops."""
    n = len(a)
    pos = [cosine(a[i], b[i]) for i in range(n)]
    neg = [cosine(a[i], b[j]) for i in range(n) for j in range(n) if i != j]
    return math.fsum(pos) / n, math.fsum(neg) / len(neg), len(neg)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 12), d=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_alignment_matches_loop_oracle(n, d, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, d)) + 0.5, rng.normal(size=(n, d)) + 0.5
    st_ = alignment(mat(0, a), mat(1, b))
    pos, neg, n_neg = loop_alignment(a, b)
    assert st_.pos_avg == pytest.approx(pos, abs=1e-13)
    assert st_.neg_avg == pytest.approx(neg, abs=1e-13)
    assert (st_.n_pos, st_.n_neg) == (n, n_neg) == (n, n * (n - 1))


def test_alignment_needs_two_samples():
    with pytest.raises(InputError):
        alignment(mat(0, [[1.0, 0.0]]), mat(1, [[1.0, 0.0]]))


def test_rel_diff_zero_negative_is_undefined():
    assert rel_diff(0.5, 0.0) is None
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    st_ = alignment(mat(0, a), mat(1, a))
    assert st_.neg_avg == 0.0 and st_.rel_diff_percent() == UNDEFINED


@pytest.mark.parametrize("setting", sorted(ALIGNMENT_ROWS))
def test_rel_diff_reference_rows(setting):
    for pos, neg, reported in ALIGNMENT_ROWS[setting]:
        assert abs(100 * rel_diff(pos, neg) - reported) <= 0.5


# --- transfer gap -----------------------------------------------------------------


def test_transfer_gap_against_exact_rationals():
    scores = {i: float(v) for i, v in enumerate(GAP_ROW.values())}
    exact = [Fraction(v) for v in GAP_ROW.values()]
    want = exact[0] - sum(exact[1:]) / len(exact[1:])
    assert abs(transfer_gap(scores) - float(want)) < 1e-9


def test_transfer_gap_errors_and_report():
    with pytest.raises(InputError):
        transfer_gap({1: 0.5, 2: 0.6})
    with pytest.raises(InputError):
        transfer_gap({0: 0.5})
    rep = GapReport.build({"ft": {0: 90.0, 1: 80.0, 2: 70.0}, "pt": {0: 88.0, 1: 84.0, 2: 80.0}})
    assert rep.entries["ft"].gap == 15.0 and rep.entries["pt"].gap == 6.0
    assert rep.langs == (0, 1, 2)
    with pytest.raises(InputError):
        GapReport.build({"ft": {0: 1.0, 1: 1.0}, "pt": {0: 1.0, 2: 1.0}})


# --- persistence ------------------------------------------------------------------


def test_reps_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(2)
    mats = [mat(l, rng.normal(size=(7, 4)) * 10.0 ** rng.integers(-8, 8), "finetuned") for l in range(3)]
    path = tmp_path / "reps.csv"
    write_reps_csv(mats, path)
    back = read_reps_csv(path)
    for a, b in zip(mats, back):
        assert a.lang == b.lang and a.tag == b.tag
        assert a.reps.tobytes() == b.reps.tobytes()
        assert np.array_equal(a.pair_ids, b.pair_ids) and np.array_equal(a.labels, b.labels)
    write_reps_csv(back, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()


def test_reps_csv_malformed(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("lang,pair_id,label,tag,x0\n0,1,0,frozen,abc\n")
    with pytest.raises(InputError):
        read_reps_csv(path)


# --- collection -------------------------------------------------------------------


def test_collect_reps_orders_by_pair_and_matches_forward(tiny_data, tiny_cfg):
    params = EncoderParams.init(tiny_cfg, 0)
    dp = init_prompts(tiny_cfg, PromptConfig(length=3))
    frozen = collect_reps(params, None, tiny_data, 1, "frozen")
    tuned = collect_reps(params, dp, tiny_data, 1, "prompttuned")
    assert np.all(np.diff(frozen.pair_ids) > 0) and len(frozen) == 40
    sample = min(tiny_data.select("analysis", 1), key=lambda s: s.pair_id)
    seq = encode_pair(sample, tiny_cfg)
    np.testing.assert_allclose(frozen.reps[0], forward(seq, params)[1].data, atol=1e-12)
    np.testing.assert_allclose(tuned.reps[0], forward(seq, params, as_past_kv(dp))[1].data, atol=1e-12)
    with pytest.raises(ContractError):
        collect_reps(params, dp, tiny_data, 1, "frozen")
    with pytest.raises(ContractError):
        collect_reps(params, None, tiny_data, 1, "prompttuned")
