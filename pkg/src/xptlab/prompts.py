"""Deep prefix prompts: per-layer key/value blocks and tuned-parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import ModelConfig, PastKV
from .errors import ContractError

INIT_SCHEME = "normal(0, init_std) i.i.d."


@dataclass(frozen=True)
class PromptConfig:
    length: int = 16
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.length < 1:
            raise ContractError(f"prompt length must be >= 1, got {self.length}")
        if not self.init_std > 0:
            raise ContractError(f"init_std must be positive, got {self.init_std}")


@dataclass
class DeepPrompt:
    """Separate key and value prompts for every layer, each ``[p, n_heads, d_head]``."""

    keys: list[np.ndarray]
    values: list[np.ndarray]

    def __post_init__(self):
        if len(self.keys) != len(self.values):
            raise ContractError("keys and values cover a different number of layers")
        shapes = {a.shape for a in self.keys} | {a.shape for a in self.values}
        if len(shapes) > 1:
            raise ContractError(f"prompt blocks disagree in shape: {sorted(shapes)}")

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def length(self) -> int:
        return self.keys[0].shape[0] if self.keys else 0

    def count(self) -> int:
        return int(sum(a.size for a in self.keys) + sum(a.size for a in self.values))

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for layer, (k, v) in enumerate(zip(self.keys, self.values)):
            out[f"prompt{layer}.k"] = k
            out[f"prompt{layer}.v"] = v
        return out

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray]) -> "DeepPrompt":
        n = sum(1 for name in arrays if name.endswith(".k"))
        return cls([arrays[f"prompt{l}.k"] for l in range(n)], [arrays[f"prompt{l}.v"] for l in range(n)])

    def copy(self) -> "DeepPrompt":
        return DeepPrompt([k.copy() for k in self.keys], [v.copy() for v in self.values])


def prompt_param_count(n_layers: int, length: int, d_model: int) -> int:
    return n_layers * 2 * length * d_model


def init_prompts(config: ModelConfig, pc: PromptConfig) -> DeepPrompt:
    rng = np.random.default_rng(pc.seed)
    shape = (pc.length, config.n_heads, config.d_head)
    keys, values = [], []
    for _ in range(config.n_layers):
        keys.append(rng.normal(0.0, pc.init_std, size=shape))
        values.append(rng.normal(0.0, pc.init_std, size=shape))
    return DeepPrompt(keys, values)


def as_past_kv(dp: DeepPrompt) -> PastKV:
    """Copy the prompt blocks into the layout ``attention_with_prefix`` consumes."""
    return PastKV([(k.copy(), v.copy()) for k, v in zip(dp.keys, dp.values)])


def from_past_kv(past: PastKV) -> DeepPrompt:
    return DeepPrompt([np.array(k, dtype=np.float64) for k, _ in past.layers],
                      [np.array(v, dtype=np.float64) for _, v in past.layers])


def tuned_param_ratio(prompt_count: int, head_count: int, backbone_count: int) -> float:
    """Share of all parameters that are tuned: ``(prompt + head) / (backbone + prompt + head)``."""
    if prompt_count < 0 or head_count < 0 or backbone_count < 0:
        raise ContractError("parameter counts must be non-negative")
    if backbone_count == 0:
        raise ContractError("backbone_count must be positive")
    tuned = prompt_count + head_count
    return tuned / (backbone_count + tuned)
