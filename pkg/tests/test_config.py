from __future__ import annotations

import json

import pytest

from xptlab.config import DataConfig, ExperimentConfig, load_config
from xptlab.errors import ContractError, InputError
from xptlab.synthlang import SplitSizes


def test_hash_is_stable_and_ignores_output_dir():
    a = ExperimentConfig()
    b = ExperimentConfig.from_dict(json.loads(a.to_json()))
    assert a == b and a.hash() == b.hash()
    c = ExperimentConfig.from_dict({**a.to_dict(), "output_dir": "elsewhere"})
    assert c.hash() == a.hash()
    d = ExperimentConfig.from_dict({**a.to_dict(), "seeds": [0]})
    assert d.hash() != a.hash()
    assert len(a.hash()) == 16


def test_json_round_trip_is_textually_stable(tmp_path):
    cfg = ExperimentConfig.from_dict({"seeds": [3], "data": {"difficulties": [0.0, 0.2, 0.4, 0.6]}})
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert load_config(path).to_json() == cfg.to_json()


@pytest.mark.parametrize("doc", [
    {"colour": 1},
    {"model": {"d_model": 64, "depth": 2}},
    {"hyper": {"learning_rate": 0.1}},
    {"data": {"sizes": {"train": 10, "dev": 1}}},
    {"analysis": {"tsne": {"perplexity": 30.0, "theta": 0.5}}},
])
def test_unknown_keys_are_input_errors(doc):
    with pytest.raises(InputError):
        ExperimentConfig.from_dict(doc)


def test_cross_field_contracts():
    with pytest.raises(ContractError):
        DataConfig(n_languages=1)
    with pytest.raises(ContractError):
        DataConfig(task_sentences=10, sizes=SplitSizes(10, 10, 10, 10))
    # a config document is user input, so the same violations surface as input errors
    with pytest.raises(InputError):
        ExperimentConfig.from_dict({"prompt": {"length": 8}})
    with pytest.raises(InputError):
        ExperimentConfig.from_dict({"seeds": []})


def test_load_config_errors(tmp_path):
    with pytest.raises(InputError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(InputError):
        load_config(tmp_path / "bad.json")
