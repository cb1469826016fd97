from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xptlab import checkpoint as ck
from xptlab.encoder import EncoderParams, ModelConfig
from xptlab.errors import BadMagicError, ChecksumError, UnsupportedVersionError
from xptlab.prompts import PromptConfig, init_prompts
from xptlab.tuning import PROMPTTUNE, Checkpoint, Hyper


def make_ckpt(cfg: ModelConfig, prompt_len: int | None = 3, seed: int = 0) -> Checkpoint:
    params = EncoderParams.init(cfg, seed)
    prompt = None if prompt_len is None else init_prompts(cfg, PromptConfig(length=prompt_len, seed=seed))
    hyper = Hyper(mode=PROMPTTUNE, prompt_length=prompt_len or 16, seed=seed)
    return Checkpoint(cfg, params, prompt, hyper, seed, {"note": "unit"})


@pytest.mark.parametrize("prompt_len", [None, 3])
def test_round_trip_is_byte_identical(tiny_cfg, tmp_path, prompt_len):
    ckpt = make_ckpt(tiny_cfg, prompt_len)
    path = tmp_path / "a.ckpt"
    ck.write_checkpoint(ckpt, path)
    back = ck.read_checkpoint(path)
    ck.write_checkpoint(back, tmp_path / "b.ckpt")
    assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for name, arr in ckpt.params.arrays.items():
        assert arr.tobytes() == back.params.arrays[name].tobytes()
    assert back.hyper == ckpt.hyper and back.seed == ckpt.seed and back.manifest == {"note": "unit"}
    assert (back.prompt is None) == (prompt_len is None)


def test_no_temp_file_left_behind(tiny_cfg, tmp_path):
    ck.write_checkpoint(make_ckpt(tiny_cfg), tmp_path / "x.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["x.ckpt"]


@pytest.mark.parametrize("where", ["payload", "manifest"])
def test_corruption_is_rejected(tiny_cfg, tmp_path, where):
    raw = bytearray(ck.to_bytes(make_ckpt(tiny_cfg)))
    (n,) = ck._LEN.unpack_from(raw, 8)
    pos = len(raw) - 17 if where == "payload" else 16 + n // 2
    raw[pos] ^= 0x01
    path = tmp_path / "bad.ckpt"
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        ck.read_checkpoint(path)


def test_truncated_file_is_rejected(tiny_cfg):
    raw = ck.to_bytes(make_ckpt(tiny_cfg))
    with pytest.raises(ChecksumError):
        ck.from_bytes(raw[:-8])


def test_bad_magic_and_version(tiny_cfg):
    raw = ck.to_bytes(make_ckpt(tiny_cfg))
    with pytest.raises(BadMagicError):
        ck.from_bytes(b"NOTXPT01" + raw[8:])
    with pytest.raises(UnsupportedVersionError):
        ck.from_bytes(ck.MAGIC_PREFIX + b"99" + raw[8:])
    with pytest.raises(BadMagicError):
        ck.from_bytes(b"")


def test_manifest_records_digests_and_counts(tiny_cfg, tmp_path):
    ckpt = make_ckpt(tiny_cfg)
    ck.write_checkpoint(ckpt, tmp_path / "m.ckpt")
    m = ck.read_manifest(tmp_path / "m.ckpt")
    assert m["backbone_sha256"] == ckpt.params.backbone_checksum()
    assert m["ratios"] == ckpt.ratios()
    assert m["prompt_length"] == 3
    assert json.dumps(m, sort_keys=True)  # plain JSON


@settings(max_examples=8, deadline=None)
@given(layers=st.integers(1, 3), heads=st.sampled_from([1, 2, 4]), width=st.sampled_from([8, 16]),
       p=st.one_of(st.none(), st.integers(1, 5)))
def test_declared_count_equals_payload(layers, heads, width, p):
    cfg = ModelConfig(n_layers=layers, n_heads=heads, d_model=width, d_ff=2 * width, vocab_size=40, max_seq=12)
    raw = ck.to_bytes(make_ckpt(cfg, p))
    m = json.loads(raw[16:16 + ck._LEN.unpack_from(raw, 8)[0]])
    payload = len(raw) - 16 - ck._LEN.unpack_from(raw, 8)[0]
    assert m["param_count"] * 8 == payload
    expected = EncoderParams.init(cfg, 0).count() + (0 if p is None else 2 * layers * p * width)
    assert m["param_count"] == expected


def test_backbone_bytes_ignores_head(tiny_cfg):
    p = EncoderParams.init(tiny_cfg, 0)
    q = p.copy()
    q.arrays["head.w"] = q.arrays["head.w"] + 1.0
    assert ck.backbone_bytes(p) == ck.backbone_bytes(q)
    q.arrays["pos_emb"] = q.arrays["pos_emb"] + np.finfo(float).eps
    assert ck.backbone_bytes(p) != ck.backbone_bytes(q)
