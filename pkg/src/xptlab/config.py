"""Experiment configuration: one JSON document covering every stage, plus a stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .encoder import ModelConfig
from .errors import ContractError, InputError
from .projection import TsneConfig
from .prompts import PromptConfig
from .synthlang import NEGATIVE_KINDS, SplitSizes
from .tuning import Hyper, PretrainConfig


@dataclass(frozen=True)
class DataConfig:
    n_languages: int = 4
    task_sentences: int = 4500
    pretrain_sentences: int = 10000
    grammar_seed: int = 0
    task_seed: int = 0
    pretrain_sample_seed: int = 1
    paraphrase_rate: float = 1.0
    variant: str = "noisy"
    sizes: SplitSizes = SplitSizes()
    difficulties: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_languages < 2:
            raise ContractError("need the source language plus at least one target")
        if self.variant not in NEGATIVE_KINDS:
            raise ContractError(f"unknown task variant {self.variant!r}")
        if self.difficulties is not None and len(self.difficulties) != self.n_languages:
            raise ContractError("one difficulty per language required")
        if self.task_sentences < sum(self.sizes.as_dict().values()):
            raise ContractError("task_sentences cannot cover the requested split sizes")


@dataclass(frozen=True)
class AnalysisConfig:
    tsne: TsneConfig = TsneConfig()
    n_analysis: int = 1000
    tsne_per_lang: int = 250  # t-SNE subsample per language (exact t-SNE is O(n^2))
    l2: float = 1e-3

    def __post_init__(self):
        if self.tsne_per_lang < 1 or self.n_analysis < 1:
            raise ContractError("analysis sizes must be positive")
        if self.tsne_per_lang > self.n_analysis:
            raise ContractError("tsne_per_lang cannot exceed n_analysis")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = ModelConfig()
    prompt: PromptConfig = PromptConfig()
    hyper: Hyper = Hyper()
    pretrain: PretrainConfig = PretrainConfig()
    data: DataConfig = DataConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.prompt.length != self.hyper.prompt_length:
            raise ContractError(
                f"prompt.length {self.prompt.length} != hyper.prompt_length {self.hyper.prompt_length}")
        if self.prompt.length > self.model.max_seq:
            raise ContractError("prompt length exceeds the max_seq budget")
        if self.data.sizes.analysis != self.analysis.n_analysis:
            raise ContractError("data.sizes.analysis must equal analysis.n_analysis")
        if not self.seeds:
            raise ContractError("at least one seed is required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hyper"] = self.hyper.to_dict()
        d["seeds"] = list(self.seeds)
        if self.data.difficulties is not None:
            d["data"]["difficulties"] = list(self.data.difficulties)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def hash(self) -> str:
        """First 16 hex digits of SHA-256 over the canonical JSON, ``output_dir`` excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        try:
            _reject_unknown(cls, d, "config")
            kw: dict[str, Any] = {}
            if "model" in d:
                kw["model"] = _build(ModelConfig, d["model"], "model")
            if "prompt" in d:
                kw["prompt"] = _build(PromptConfig, d["prompt"], "prompt")
            if "hyper" in d:
                _reject_unknown(Hyper, d["hyper"], "hyper")
                kw["hyper"] = Hyper.from_dict(d["hyper"])
            if "pretrain" in d:
                kw["pretrain"] = _build(PretrainConfig, d["pretrain"], "pretrain")
            if "data" in d:
                dd = dict(d["data"])
                _reject_unknown(DataConfig, dd, "data")
                if "sizes" in dd:
                    dd["sizes"] = _build(SplitSizes, dd["sizes"], "data.sizes")
                if dd.get("difficulties") is not None:
                    dd["difficulties"] = tuple(float(x) for x in dd["difficulties"])
                kw["data"] = DataConfig(**dd)
            if "analysis" in d:
                ad = dict(d["analysis"])
                _reject_unknown(AnalysisConfig, ad, "analysis")
                if "tsne" in ad:
                    ad["tsne"] = _build(TsneConfig, ad["tsne"], "analysis.tsne")
                kw["analysis"] = AnalysisConfig(**ad)
            if "seeds" in d:
                kw["seeds"] = tuple(int(s) for s in d["seeds"])
            if "output_dir" in d:
                kw["output_dir"] = str(d["output_dir"])
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise InputError(f"invalid config: {exc}") from exc


def _reject_unknown(cls, d: Mapping, where: str) -> None:
    if not isinstance(d, Mapping):
        raise InputError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise InputError(f"{where}: unknown keys {extra}")


def _build(cls, d: Mapping, where: str):
    _reject_unknown(cls, d, where)
    return cls(**d)


def load_config(path) -> ExperimentConfig:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"config file {path} not found") from None
    try:
        d = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(d)
