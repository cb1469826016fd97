"""Fine-tuning and prompt tuning on the source language, Adam with linear decay,
learning-rate selection, evaluation, and MLM pretraining of the backbone."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import kernels as K
from . import tensor as T
from .encoder import EncoderParams, ModelConfig, PastKV, classify, cls_rows, encode, mlm_logits
from .errors import ContractError, InputError, InvariantError
from .prompts import DeepPrompt, PromptConfig, init_prompts, prompt_param_count, tuned_param_ratio
from .synthlang import MultilingualDataset, TaskSample, build_mlm_batches, encode_pair, pad_batch

FINETUNE = "ft"
PROMPTTUNE = "pt"
MODES = (FINETUNE, PROMPTTUNE)
DEFAULT_GRID = (5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4)
EVAL_BATCH = 250


@dataclass(frozen=True)
class Hyper:
    mode: str = PROMPTTUNE
    lr: float = 1e-3
    lr_grid: tuple[float, ...] = DEFAULT_GRID
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    prompt_length: int = 16
    probe_epochs: int = 3
    test_every: int = 1  # 0: per-language test accuracy only after the last epoch
    precision: str = "float32"  # arithmetic dtype of forward/backward; parameters stay float64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lr > 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1 or self.probe_epochs < 1:
            raise ContractError("epochs, batch_size and probe_epochs must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ContractError(f"precision must be float32 or float64, got {self.precision!r}")
        if not self.lr_grid or any(not lr > 0 for lr in self.lr_grid):
            raise ContractError("lr_grid must be a non-empty list of positive rates")
        object.__setattr__(self, "lr_grid", tuple(float(x) for x in self.lr_grid))

    def with_(self, **kw) -> "Hyper":
        d = asdict(self)
        d.update(kw)
        return Hyper(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_grid"] = list(self.lr_grid)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Hyper":
        d = dict(d)
        if "lr_grid" in d:
            d["lr_grid"] = tuple(d["lr_grid"])
        return cls(**d)


# --- optimiser -----------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray], names: Sequence[str]) -> "AdamState":
        return cls({n: np.zeros(np.shape(params[n])) for n in names}, {n: np.zeros(np.shape(params[n])) for n in names})

    @property
    def names(self) -> list[str]:
        return list(self.m)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update of the parameters named in ``state``.

    Returns a new name -> array map; names outside the state are passed through
    untouched. ``state`` is advanced in place (``t`` increases by one).
    """
    for name in grads:
        if name not in state.m:
            raise ContractError(f"gradient for {name!r}, which is not in the optimiser state")
    for name in state.m:
        g = grads.get(name)
        if g is not None and g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} for {name!r} vs parameter {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = dict(params)
    for name in state.m:
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.dtype not in (np.float32, np.float64):
            g = g.astype(np.float64)
        new = K.adam_update(np.ascontiguousarray(p, dtype=np.float64).reshape(-1),
                            np.ascontiguousarray(g).reshape(-1),
                            state.m[name].reshape(-1), state.v[name].reshape(-1),
                            lr, b1, b2, c1, c2, state.eps)
        out[name] = new.reshape(p.shape)
    return out


def linear_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Linear decay from ``base_lr`` at step 0 to 0 at ``total_steps``; no warmup."""
    if total_steps < 1:
        raise ContractError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps)


# --- data plumbing -------------------------------------------------------


def encode_samples(samples: Sequence[TaskSample], cfg: ModelConfig) -> list[np.ndarray]:
    return [encode_pair(s, cfg) for s in samples]


def batch_order(lengths: np.ndarray, batch_size: int, rng: np.random.Generator, window: int = 8) -> list[np.ndarray]:
    """Seeded shuffle, then length-sorting inside windows of ``window`` batches to cut padding."""
    order = rng.permutation(len(lengths))
    span = batch_size * window
    batches = []
    for start in range(0, len(order), span):
        chunk = order[start:start + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def _past(prompts: Mapping[str, T.Tensor | np.ndarray], n_layers: int) -> PastKV:
    return PastKV([(prompts[f"prompt{l}.k"], prompts[f"prompt{l}.v"]) for l in range(n_layers)])


def _logits(weights, cfg: ModelConfig, tokens: np.ndarray, past: PastKV | None) -> T.Tensor:
    hidden = encode(weights, cfg, tokens, past, cls_only=True)
    return classify(cls_rows(hidden), weights["head.w"], weights["head.b"])


def predict(params: EncoderParams, prompts: DeepPrompt | None, seqs: Sequence[np.ndarray]) -> np.ndarray:
    """Argmax labels for encoded sequences, in input order (batched by length)."""
    cfg = params.config
    past = None if prompts is None else _past(prompts.named(), cfg.n_layers)
    lengths = np.array([len(s) for s in seqs])
    order = np.argsort(lengths, kind="stable")
    preds = np.empty(len(seqs), dtype=np.int64)
    for start in range(0, len(order), EVAL_BATCH):
        idx = order[start:start + EVAL_BATCH]
        tokens = pad_batch([seqs[i] for i in idx], cfg.pad_token_id)
        preds[idx] = np.argmax(_logits(params.arrays, cfg, tokens, past).data, axis=1)
    return preds


def accuracy(params: EncoderParams, prompts: DeepPrompt | None, samples: Sequence[TaskSample],
             seqs: Sequence[np.ndarray] | None = None) -> float:
    if not samples:
        raise InputError("cannot score an empty sample set")
    seqs = encode_samples(samples, params.config) if seqs is None else seqs
    labels = np.array([s.label for s in samples])
    return float(np.mean(predict(params, prompts, seqs) == labels))


def evaluate(
    params: EncoderParams,
    prompts: DeepPrompt | None,
    data: MultilingualDataset,
    langs: Sequence[int] | None = None,
    split: str = "test",
) -> dict[int, float]:
    """Accuracy per language on ``split``."""
    langs = data.lang_ids if langs is None else list(langs)
    out = {}
    for lang in langs:
        samples = data.select(split, lang)
        if not samples:
            raise InputError(f"no {split} samples for language {lang}")
        out[lang] = accuracy(params, prompts, samples)
    return out


# --- training ------------------------------------------------------------


@dataclass
class RunHistory:
    mode: str
    seed: int
    lr: float
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)  # running accuracy over each epoch's batches
    val_acc: list[float] = field(default_factory=list)
    test_acc: dict[int, dict[int, float]] = field(default_factory=dict)  # epoch -> lang -> acc
    final_train_acc: float = float("nan")
    backbone_checksum_before: str = ""
    backbone_checksum_after: str = ""
    diverged: bool = False
    steps: int = 0
    seconds: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["test_acc"] = {str(e): {str(l): a for l, a in accs.items()} for e, accs in self.test_acc.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunHistory":
        d = dict(d)
        d["test_acc"] = {int(e): {int(l): float(a) for l, a in accs.items()} for e, accs in d["test_acc"].items()}
        return cls(**d)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: EncoderParams
    prompt: DeepPrompt | None = None
    hyper: Hyper | None = None
    seed: int = 0
    manifest: dict = field(default_factory=dict)

    def ratios(self) -> dict[str, float]:
        """Tuned-parameter ratios: prompts only, and prompts plus classifier head."""
        backbone = self.params.count(self.params.backbone_names)
        head = self.params.count(self.params.head_names)
        prompt = 0 if self.prompt is None else self.prompt.count()
        return {
            "prompt_only": tuned_param_ratio(prompt, 0, backbone),
            "prompt_and_head": tuned_param_ratio(prompt, head, backbone),
        }


def trainable_names(params: EncoderParams, mode: str, prompt: DeepPrompt | None) -> list[str]:
    if mode == FINETUNE:
        return params.backbone_names + params.head_names
    return list(prompt.named()) + params.head_names


def train(
    model: EncoderParams,
    data: MultilingualDataset,
    h: Hyper,
    prompt_cfg: PromptConfig | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[Checkpoint, RunHistory]:
    """One zero-shot run: train on source-language pairs, score val each epoch.

    FineTune updates every backbone parameter and the head. PromptTune updates
    the deep prompts and the head only; the backbone checksum is verified to be
    unchanged at the end. ``model`` itself is never mutated.
    """
    cfg = model.config
    train_set = data.select("train", 0)
    if not train_set:
        raise InputError("empty source-language train split")
    val_set = data.select("val", 0)
    params = model.copy()
    params.reset_head(h.seed)
    prompt = None
    if h.mode == PROMPTTUNE:
        pc = prompt_cfg or PromptConfig(length=h.prompt_length, seed=h.seed)
        if pc.length != h.prompt_length:
            pc = PromptConfig(length=h.prompt_length, init_std=pc.init_std, seed=pc.seed)
        prompt_cfg = pc
        prompt = init_prompts(cfg, pc)
    before = params.backbone_checksum()
    hist = RunHistory(h.mode, h.seed, h.lr, backbone_checksum_before=before)

    names = trainable_names(params, h.mode, prompt)
    values: dict[str, np.ndarray] = dict(params.arrays)
    if prompt is not None:
        values.update(prompt.named())
    state = AdamState.zeros(values, names)
    seqs = encode_samples(train_set, cfg)
    labels = np.array([s.label for s in train_set])
    lengths = np.array([len(s) for s in seqs])
    val_seqs = encode_samples(val_set, cfg) if val_set else []
    rng = np.random.default_rng([h.seed, 5])
    total = math.ceil(len(seqs) / h.batch_size) * h.epochs
    step = 0
    t0 = time.perf_counter()
    dtype = np.dtype(h.precision)
    # frozen arrays are cast once; trainable ones are cast when watched
    frozen = {n: v.astype(dtype) for n, v in values.items() if n not in names}

    def snapshot() -> tuple[EncoderParams, DeepPrompt | None]:
        p = EncoderParams(cfg, {n: values[n] for n in params.arrays})
        dp = None if prompt is None else DeepPrompt.from_named({n: values[n] for n in prompt.named()})
        return p, dp

    with T.precision(dtype):
        for epoch in range(h.epochs):
            loss_sum = 0.0
            correct = 0
            seen = 0
            for idx in batch_order(lengths, h.batch_size, rng):
                tokens = pad_batch([seqs[i] for i in idx], cfg.pad_token_id)
                tape = T.Tape()
                weights: dict = dict(frozen)
                for n in names:
                    weights[n] = tape.watch(values[n])
                past = _past(weights, cfg.n_layers) if prompt is not None else None
                logits = _logits(weights, cfg, tokens, past)
                loss = T.cross_entropy_logits(logits, labels[idx])
                lv = loss.item()
                if not math.isfinite(lv):
                    hist.diverged = True
                    break
                grads = T.backward(loss)
                g = {n: grads[weights[n].node] for n in names if weights[n].node in grads}
                values = adam_step(values, g, state, linear_lr(step, total, h.lr))
                step += 1
                loss_sum += lv * len(idx)
                correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
                seen += len(idx)
            if hist.diverged:
                break
            hist.train_loss.append(loss_sum / seen)
            hist.train_acc.append(correct / seen)
            p_now, dp_now = snapshot()
            if val_set:
                hist.val_acc.append(accuracy(p_now, dp_now, val_set, val_seqs))
            last = epoch == h.epochs - 1
            if last or (h.test_every and (epoch + 1) % h.test_every == 0):
                hist.test_acc[epoch + 1] = evaluate(p_now, dp_now, data)
            if log:
                val = f" val {hist.val_acc[-1]:.3f}" if val_set else ""
                log(f"[{h.mode} seed {h.seed} lr {h.lr:g}] epoch {epoch + 1}/{h.epochs} "
                    f"loss {hist.train_loss[-1]:.4f} acc {hist.train_acc[-1]:.3f}{val}")
        final, final_prompt = snapshot()
        if not hist.diverged:
            hist.final_train_acc = accuracy(final, final_prompt, train_set, seqs)

    hist.steps = step
    hist.backbone_checksum_after = final.backbone_checksum()
    hist.seconds = time.perf_counter() - t0
    if h.mode == PROMPTTUNE and hist.backbone_checksum_after != before:
        raise InvariantError("backbone parameters changed during prompt tuning")
    ckpt = Checkpoint(cfg, final, final_prompt, h, h.seed)
    ckpt.manifest = run_manifest(ckpt, prompt_cfg)
    return ckpt, hist


def run_manifest(ckpt: Checkpoint, prompt_cfg: PromptConfig | None = None) -> dict:
    out = {"ratios": ckpt.ratios(), "backbone_checksum": ckpt.params.backbone_checksum()}
    if ckpt.prompt is not None:
        out["prompt_init"] = {
            "scheme": "normal(0, init_std) i.i.d.",
            "init_std": prompt_cfg.init_std if prompt_cfg else PromptConfig().init_std,
            "length": ckpt.prompt.length,
            "param_count": prompt_param_count(ckpt.config.n_layers, ckpt.prompt.length, ckpt.config.d_model),
        }
    return out


def select_lr(
    model: EncoderParams,
    data: MultilingualDataset,
    h: Hyper,
    prompt_cfg: PromptConfig | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[float, dict[float, float]]:
    """Short probes (``h.probe_epochs``) per grid point with identical seeds.

    Returns the rate with the best final source-language val accuracy (ties go
    to the smaller rate; diverged probes score -inf) and every probe's score.
    """
    if not h.lr_grid:
        raise ContractError("empty learning-rate grid")
    scores: dict[float, float] = {}
    if len(h.lr_grid) == 1:
        return h.lr_grid[0], {h.lr_grid[0]: float("nan")}
    for lr in h.lr_grid:
        _, hist = train(model, data, h.with_(lr=lr, epochs=h.probe_epochs, test_every=0), prompt_cfg)
        score = hist.val_acc[-1] if hist.val_acc and not hist.diverged else -math.inf
        scores[lr] = score if math.isfinite(score) else -math.inf
        if log:
            log(f"[{h.mode} probe] lr {lr:g}: val {scores[lr]:.4f}")
    best = max(sorted(scores), key=lambda lr: (scores[lr], -lr))
    return best, scores


# --- MLM pretraining -----------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 5
    lr: float = 3e-3
    batch_size: int = 32
    mask_rate: float = 0.3
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ContractError("invalid pretraining settings")
        if self.precision not in ("float32", "float64"):
            raise ContractError(f"precision must be float32 or float64, got {self.precision!r}")


def mlm_loss(weights, cfg: ModelConfig, batch) -> T.Tensor:
    hidden = encode(weights, cfg, batch.tokens)
    picked = hidden[batch.rows, batch.cols]
    return T.cross_entropy_logits(mlm_logits(picked, weights), batch.targets)


def pretrain(
    model: EncoderParams,
    corpora: Sequence[Sequence[np.ndarray]],
    pc: PretrainConfig = PretrainConfig(),
    log: Callable[[str], None] | None = None,
) -> tuple[EncoderParams, list[float]]:
    """Masked-LM training of every backbone parameter over all languages' corpora.

    Masks are redrawn each epoch. Returns the new parameters and per-epoch mean loss.
    """
    cfg = model.config
    names = model.backbone_names
    values = dict(model.arrays)
    state = AdamState.zeros(values, names)
    n_batches = len(build_mlm_batches(corpora, cfg, pc.mask_rate, pc.seed, pc.batch_size))
    total = n_batches * pc.epochs
    step = 0
    losses = []
    with T.precision(pc.precision):
        for epoch in range(pc.epochs):
            step, mean_loss, values = _mlm_epoch(cfg, names, values, state, corpora, pc, epoch, step, total)
            losses.append(mean_loss)
            if log:
                log(f"[pretrain] epoch {epoch + 1}/{pc.epochs} mlm loss {losses[-1]:.4f}")
    return EncoderParams(cfg, values), losses


def _mlm_epoch(cfg, names, values, state, corpora, pc, epoch, step, total):
    """One pass over freshly masked batches. Returns (step, mean loss, parameters)."""
    batches = build_mlm_batches(corpora, cfg, pc.mask_rate, pc.seed * 1000 + epoch, pc.batch_size)
    total_loss = 0.0
    count = 0
    for batch in batches:
        if len(batch.targets) == 0:
            continue
        tape = T.Tape()
        weights = dict(values)
        for n in names:
            weights[n] = tape.watch(values[n])
        loss = mlm_loss(weights, cfg, batch)
        grads = T.backward(loss)
        g = {n: grads[weights[n].node] for n in names if weights[n].node in grads}
        values = adam_step(values, g, state, linear_lr(step, total, pc.lr))
        step += 1
        total_loss += loss.item()
        count += 1
    return step, total_loss / max(count, 1), values
