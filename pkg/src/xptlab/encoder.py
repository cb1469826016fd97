"""Pre-norm transformer encoder whose attention layers accept prefix key/value prompts."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, InputError
from .tensor import Tape, Tensor

Weight = Union[Tensor, np.ndarray]

LAYER_KEYS = ("ln1.g", "ln1.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
              "ln2.g", "ln2.b", "w1", "b1", "w2", "b2")
HEAD_NAMES = ("head.w", "head.b")
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 512
    max_seq: int = 32
    n_classes: int = 2
    pad_token_id: int = 0
    cls_token_id: int = 1
    mask_token_id: int = 2
    sep_token_id: int = 3

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq", "n_classes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        specials = self.special_ids
        if len(set(specials)) != len(specials):
            raise ContractError(f"special token ids must be distinct: {specials}")
        if max(specials) >= self.vocab_size or min(specials) < 0:
            raise ContractError("special token ids must lie in [0, vocab_size)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def special_ids(self) -> tuple[int, ...]:
        return (self.pad_token_id, self.cls_token_id, self.mask_token_id, self.sep_token_id)

    @property
    def n_special(self) -> int:
        return max(self.special_ids) + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in canonical order (backbone, then head)."""
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq, d),
    }
    per_layer = {
        "ln1.g": (d,), "ln1.b": (d,),
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
        "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,),
        "ln2.g": (d,), "ln2.b": (d,),
        "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
    }
    for layer in range(cfg.n_layers):
        for key in LAYER_KEYS:
            shapes[f"layer{layer}.{key}"] = per_layer[key]
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head.w"] = (d, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


def backbone_param_count(cfg: ModelConfig) -> int:
    d, f, L = cfg.d_model, cfg.d_ff, cfg.n_layers
    per_layer = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d
    return cfg.vocab_size * d + cfg.max_seq * d + L * per_layer + 2 * d


def head_param_count(cfg: ModelConfig) -> int:
    return cfg.d_model * cfg.n_classes + cfg.n_classes


@dataclass
class EncoderParams:
    """Backbone weights plus the classifier head, keyed by parameter name.

    The MLM head is tied to ``tok_emb``.
    """

    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(repr=False)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in param_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                arrays[name] = np.ones(shape)
            elif leaf.startswith("b"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.normal(0.0, INIT_STD, size=shape)
        return cls(cfg, arrays)

    @property
    def backbone_names(self) -> list[str]:
        return [n for n in self.arrays if n not in HEAD_NAMES]

    @property
    def head_names(self) -> list[str]:
        return list(HEAD_NAMES)

    def count(self, names: Sequence[str] | None = None) -> int:
        names = self.arrays if names is None else names
        return int(sum(self.arrays[n].size for n in names))

    def backbone_checksum(self) -> str:
        return checksum_arrays({n: self.arrays[n] for n in self.backbone_names})

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def reset_head(self, seed: int) -> None:
        """Fresh classifier head (normal(0, 0.02) weights, zero bias)."""
        rng = np.random.default_rng(seed)
        self.arrays["head.w"] = rng.normal(0.0, INIT_STD, size=(self.config.d_model, self.config.n_classes))
        self.arrays["head.b"] = np.zeros(self.config.n_classes)

    def bind(self, tape: Tape | None = None, trainable: Sequence[str] = ()) -> dict[str, Weight]:
        """Name -> tensor map for a forward pass; ``trainable`` names are watched on ``tape``."""
        out: dict[str, Weight] = dict(self.arrays)
        if trainable:
            if tape is None:
                raise ContractError("trainable parameters need a tape")
            for name in trainable:
                out[name] = tape.watch(self.arrays[name])
        return out


def checksum_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class PastKV:
    """Per-layer prefix keys and values, each shaped ``[p, n_heads, d_head]``."""

    layers: list[tuple[Weight, Weight]]

    def __post_init__(self):
        lengths = set()
        for k, v in self.layers:
            if k.shape != v.shape:
                raise ContractError(f"prefix key {k.shape} and value {v.shape} disagree")
            if len(k.shape) != 3:
                raise ContractError(f"prefix tensors must be [p, H, d_head], got {k.shape}")
            lengths.add(k.shape[0])
        if len(lengths) > 1:
            raise ContractError(f"prefix length differs across layers: {sorted(lengths)}")

    @property
    def length(self) -> int:
        return self.layers[0][0].shape[0] if self.layers else 0

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "PastKV":
        z = np.zeros((0, cfg.n_heads, cfg.d_head))
        return cls([(z, z) for _ in range(cfg.n_layers)])


def _w(params: Mapping[str, Weight], name: str) -> Tensor:
    return T.as_tensor(params[name])


def attention_with_prefix(
    x: Weight,
    params: Mapping[str, Weight],
    prefix: str,
    n_heads: int,
    past_layer: tuple[Weight, Weight] | None = None,
    key_keep: np.ndarray | None = None,
    return_weights: bool = False,
    n_queries: int | None = None,
):
    """Multi-head self-attention where prompt keys/values are prepended to the key axis.

    ``x`` is ``[seq, d]`` or ``[batch, seq, d]``; ``key_keep`` marks non-pad real
    positions (``[seq]`` or ``[batch, seq]``). Prompt positions are always visible
    and never act as queries, so the output keeps the input's sequence length.
    ``n_queries`` restricts the queries (and output rows) to the first positions.
    """
    x = T.as_tensor(x)
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
        if key_keep is not None:
            key_keep = np.asarray(key_keep)[None, :]
    B, S, d = x.shape
    if d % n_heads:
        raise DimensionError(f"d_model {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    Sq = S if n_queries is None else n_queries
    if not 0 < Sq <= S:
        raise ContractError(f"n_queries must lie in [1, {S}], got {Sq}")

    def heads(t: Tensor, rows: int = S) -> Tensor:
        return t.reshape(B, rows, n_heads, dh).transpose(0, 2, 1, 3)

    xq = x if Sq == S else x[:, :Sq]
    q = heads(xq @ _w(params, prefix + "wq") + _w(params, prefix + "bq"), Sq)
    k = heads(x @ _w(params, prefix + "wk") + _w(params, prefix + "bk"))
    v = heads(x @ _w(params, prefix + "wv") + _w(params, prefix + "bv"))

    if past_layer is None:
        kp = vp = np.zeros((0, n_heads, dh))
    else:
        kp, vp = past_layer
        if kp.shape != vp.shape:
            raise ContractError(f"prefix key {kp.shape} and value {vp.shape} disagree")
        if tuple(kp.shape[1:]) != (n_heads, dh):
            raise DimensionError(f"prefix shape {kp.shape} incompatible with {n_heads} heads of {dh}")
    p = kp.shape[0]
    k_ext = T.prepend_prefix(kp, k)
    v_ext = T.prepend_prefix(vp, v)

    scores = (q @ T.swap_last(k_ext)) * (1.0 / math.sqrt(dh))
    keep = np.ones((B, p + S), dtype=bool)
    if key_keep is not None:
        keep[:, p:] = key_keep
    attn = T.softmax(scores, axis=-1, mask=keep[:, None, None, :])
    ctx = (attn @ v_ext).transpose(0, 2, 1, 3).reshape(B, Sq, d)
    out = ctx @ _w(params, prefix + "wo") + _w(params, prefix + "bo")
    if single:
        out = out.reshape(Sq, d)
    if return_weights:
        return out, attn
    return out


def validate_tokens(cfg: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.ndim != 2:
        raise InputError(f"token batch must be 2-D, got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds max_seq {cfg.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise InputError("token id outside [0, vocab_size)")
    if tokens.shape[1] and np.any(tokens[:, 0] != cfg.cls_token_id):
        raise InputError("every sequence must start with the CLS token")


def encode(
    params: Mapping[str, Weight],
    cfg: ModelConfig,
    tokens: np.ndarray,
    past: PastKV | None = None,
    cls_only: bool = False,
) -> Tensor:
    """Hidden states ``[batch, seq, d_model]`` for a padded token batch.

    With ``cls_only`` the last layer is evaluated for the CLS row alone and the
    result is ``[batch, 1, d_model]``; that row is identical to the full pass.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    validate_tokens(cfg, tokens)
    if past is not None and len(past.layers) != cfg.n_layers:
        raise ContractError(f"prefix has {len(past.layers)} layers, model has {cfg.n_layers}")
    B, S = tokens.shape
    keep = tokens != cfg.pad_token_id
    h = T.take_rows(_w(params, "tok_emb"), tokens) + _w(params, "pos_emb")[:S]
    for layer in range(cfg.n_layers):
        pre = f"layer{layer}."
        a = T.layer_norm(h, _w(params, pre + "ln1.g"), _w(params, pre + "ln1.b"))
        past_layer = None if past is None else past.layers[layer]
        if cls_only and layer == cfg.n_layers - 1:
            h = h[:, :1] + attention_with_prefix(a, params, pre, cfg.n_heads, past_layer, keep, n_queries=1)
        else:
            h = h + attention_with_prefix(a, params, pre, cfg.n_heads, past_layer, keep)
        f = T.layer_norm(h, _w(params, pre + "ln2.g"), _w(params, pre + "ln2.b"))
        f = T.gelu(f @ _w(params, pre + "w1") + _w(params, pre + "b1"))
        h = h + (f @ _w(params, pre + "w2") + _w(params, pre + "b2"))
    return T.layer_norm(h, _w(params, "ln_f.g"), _w(params, "ln_f.b"))


def _as_mapping(params) -> tuple[Mapping[str, Weight], ModelConfig]:
    if isinstance(params, EncoderParams):
        return params.arrays, params.config
    raise ContractError("expected EncoderParams")


def forward(tokens, params: EncoderParams, past: PastKV | None = None) -> tuple[Tensor, Tensor]:
    """Encode one sequence. Returns ``(hidden [seq, d_model], cls [d_model])``."""
    arrays, cfg = _as_mapping(params)
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise InputError("forward takes a single 1-D token sequence")
    hidden = encode(arrays, cfg, tokens[None, :], past)[0]
    return hidden, hidden[0]


def cls_rows(hidden: Tensor) -> Tensor:
    return hidden[:, 0]


def classify(cls: Weight, head_w: Weight, head_b: Weight) -> Tensor:
    """Affine classifier over CLS vectors; returns logits (no softmax)."""
    c = T.as_tensor(cls)
    if c.ndim == 1:
        return (c.reshape(1, -1) @ head_w + head_b).reshape(-1)
    return c @ head_w + head_b


def mlm_logits(hidden: Weight, params: Mapping[str, Weight]) -> Tensor:
    """Vocabulary logits through the tied embedding matrix: ``hidden @ tok_emb.T``."""
    return T.as_tensor(hidden) @ T.transpose(_w(params, "tok_emb"))
