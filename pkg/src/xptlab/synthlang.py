"""Synthetic multilingual benchmark: a template grammar, permutation languages,
a paraphrase-pair classification task and MLM corruption.

Every sentence is a sequence of content tokens drawn from a seeded lexicon of
synonym classes. A "language" is a bijection over the content vocabulary, so a
translation is a tokenwise relabelling and the analysis split is exactly
parallel across languages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .encoder import ModelConfig
from .errors import ContractError, InputError

CLASSES = ("DET", "NOUN", "VERB", "ADJ", "ADV", "PREP")
# share of concepts per word class (DET 4, NOUN 90, VERB 60, ADJ 50, ADV 40, PREP 10 at V=512)
CLASS_WEIGHTS = np.array([4, 90, 60, 50, 40, 10], dtype=np.float64)
N_SYNONYMS = 2
SPLITS = ("train", "val", "test", "analysis")
NEGATIVE_KINDS = {"noisy": ("swap", "replace", "mismatch"), "strict": ("swap", "replace")}


# --- lexicon and grammar ---------------------------------------------------


@dataclass(frozen=True)
class Grammar:
    """Seeded lexicon: each concept owns ``N_SYNONYMS`` interchangeable token ids."""

    vocab_size: int
    n_special: int
    seed: int
    concept_class: np.ndarray = field(repr=False)  # [n_concepts] index into CLASSES
    concept_tokens: np.ndarray = field(repr=False)  # [n_concepts, N_SYNONYMS]
    token_concept: np.ndarray = field(repr=False)  # [V], -1 for specials/unused

    @property
    def n_concepts(self) -> int:
        return len(self.concept_class)

    def concepts_of(self, cls: str) -> np.ndarray:
        return np.flatnonzero(self.concept_class == CLASSES.index(cls))

    def token_class(self, token: int) -> str:
        c = self.token_concept[token]
        if c < 0:
            raise InputError(f"token {token} is not a content word")
        return CLASSES[self.concept_class[c]]

    def synonym(self, token: int) -> int:
        """The other surface form of the same concept."""
        row = self.concept_tokens[self.token_concept[token]]
        return int(row[1] if row[0] == token else row[0])


def make_grammar(vocab_size: int = 512, n_special: int = 4, seed: int = 0) -> Grammar:
    n_concepts = (vocab_size - n_special) // N_SYNONYMS
    if n_concepts < 4 * len(CLASSES):
        raise ContractError(f"vocab_size {vocab_size} too small for the grammar")
    raw = CLASS_WEIGHTS / CLASS_WEIGHTS.sum() * n_concepts
    sizes = np.maximum(np.floor(raw).astype(int), 2)
    # hand the rounding remainder to the open classes, largest first
    order = np.argsort(-raw)
    i = 0
    while sizes.sum() < n_concepts:
        sizes[order[i % len(order)]] += 1
        i += 1
    while sizes.sum() > n_concepts:
        j = order[i % len(order)]
        if sizes[j] > 2:
            sizes[j] -= 1
        i += 1
    concept_class = np.repeat(np.arange(len(CLASSES)), sizes)
    rng = np.random.default_rng(seed)
    ids = n_special + rng.permutation(n_concepts * N_SYNONYMS)
    concept_tokens = ids.reshape(n_concepts, N_SYNONYMS)
    token_concept = np.full(vocab_size, -1, dtype=np.int64)
    for c, row in enumerate(concept_tokens):
        token_concept[row] = c
    return Grammar(vocab_size, n_special, seed, concept_class, concept_tokens, token_concept)


@dataclass
class Corpus:
    """Source-language sentences (content tokens only) plus the grammar that made them."""

    grammar: Grammar
    sentences: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.sentences)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.sentences[i]


def _word(grammar: Grammar, rng: np.random.Generator, cls: str) -> int:
    concept = rng.choice(grammar.concepts_of(cls))
    return int(grammar.concept_tokens[concept, rng.integers(N_SYNONYMS)])


def _noun_phrase(grammar: Grammar, rng: np.random.Generator) -> list[int]:
    words = []
    if rng.random() < 0.5:
        words.append(_word(grammar, rng, "DET"))
    if rng.random() < 0.5:
        words.append(_word(grammar, rng, "ADJ"))
    words.append(_word(grammar, rng, "NOUN"))
    return words


def _sentence(grammar: Grammar, rng: np.random.Generator) -> np.ndarray:
    words = _noun_phrase(grammar, rng) + [_word(grammar, rng, "VERB")] + _noun_phrase(grammar, rng)
    mods = rng.integers(3)  # 0: PP, 1: ADV, 2: both; at least one modifier always
    if mods in (0, 2):
        words += [_word(grammar, rng, "PREP")] + _noun_phrase(grammar, rng)
    if mods in (1, 2):
        words.append(_word(grammar, rng, "ADV"))
    return np.asarray(words, dtype=np.int64)


def gen_base_corpus(
    n_sentences: int,
    grammar_seed: int,
    vocab_size: int = 512,
    n_special: int = 4,
    sample_seed: int | None = None,
) -> Corpus:
    """Source-language sentences of 4-12 content tokens from a seeded template grammar.

    Template: SUBJ_NP VERB OBJ_NP [PREP NP] [ADV] with at least one modifier,
    where NP = [DET] [ADJ] NOUN. ``sample_seed`` (default ``grammar_seed``) draws
    the sentences; the lexicon depends only on ``grammar_seed``.
    """
    if n_sentences < 1:
        raise InputError("n_sentences must be >= 1")
    grammar = make_grammar(vocab_size, n_special, grammar_seed)
    rng = np.random.default_rng([grammar_seed, grammar_seed if sample_seed is None else sample_seed, 1])
    return Corpus(grammar, [_sentence(grammar, rng) for _ in range(n_sentences)])


# --- parsing and rewriting -------------------------------------------------


def parse(grammar: Grammar, tokens: Sequence[int]) -> list[tuple[str, list[int]]]:
    """Split a canonical-order sentence into (slot, tokens) segments."""
    toks = [int(t) for t in tokens]
    classes = [grammar.token_class(t) for t in toks]
    pos = 0

    def np_at(start: int) -> int:
        i = start
        while i < len(toks) and classes[i] in ("DET", "ADJ"):
            i += 1
        if i >= len(toks) or classes[i] != "NOUN":
            raise InputError(f"malformed noun phrase at {start}: {toks}")
        return i + 1

    segs = []
    end = np_at(pos)
    segs.append(("subj", toks[pos:end]))
    pos = end
    if pos >= len(toks) or classes[pos] != "VERB":
        raise InputError(f"missing verb: {toks}")
    segs.append(("verb", toks[pos:pos + 1]))
    pos += 1
    end = np_at(pos)
    segs.append(("obj", toks[pos:end]))
    pos = end
    if pos < len(toks) and classes[pos] == "PREP":
        end = np_at(pos + 1)
        segs.append(("pp", toks[pos:end]))
        pos = end
    if pos < len(toks) and classes[pos] == "ADV":
        segs.append(("adv", toks[pos:pos + 1]))
        pos += 1
    if pos != len(toks) or len(segs) < 4:
        raise InputError(f"sentence does not fit the template: {toks}")
    return segs


def _flatten(segs: Iterable[tuple[str, list[int]]]) -> np.ndarray:
    return np.asarray([t for _, seg in segs for t in seg], dtype=np.int64)


def paraphrase(grammar: Grammar, segs, rng: np.random.Generator, flip_prob: float = 0.1) -> np.ndarray:
    """Synonym substitution at >= 1 position, then the trailing modifier moves to the front."""
    segs = [(slot, list(seg)) for slot, seg in segs]
    positions = [(i, j) for i, (_, seg) in enumerate(segs) for j in range(len(seg))]
    flips = [p for p in positions if rng.random() < flip_prob]
    if not flips:
        flips = [positions[rng.integers(len(positions))]]
    for i, j in flips:
        segs[i][1][j] = grammar.synonym(segs[i][1][j])
    last = segs.pop()
    return _flatten([last] + segs)


def _corrupt(grammar: Grammar, segs, kind: str, rng: np.random.Generator):
    segs = [(slot, list(seg)) for slot, seg in segs]
    if kind == "swap":
        i_s = next(i for i, (s, _) in enumerate(segs) if s == "subj")
        i_o = next(i for i, (s, _) in enumerate(segs) if s == "obj")
        subj_c = [grammar.token_concept[t] for t in segs[i_s][1]]
        obj_c = [grammar.token_concept[t] for t in segs[i_o][1]]
        if subj_c != obj_c:
            segs[i_s], segs[i_o] = ("subj", segs[i_o][1]), ("obj", segs[i_s][1])
            return segs
        kind = "replace"
    if kind == "replace":
        i_o = next(i for i, (s, _) in enumerate(segs) if s == "obj")
        noun = segs[i_o][1][-1]
        old = grammar.token_concept[noun]
        nouns = grammar.concepts_of("NOUN")
        new = old
        while new == old:
            new = rng.choice(nouns)
        segs[i_o][1][-1] = int(grammar.concept_tokens[new, rng.integers(N_SYNONYMS)])
        return segs
    raise ContractError(f"unknown corruption {kind!r}")


# --- languages -------------------------------------------------------------


@dataclass(frozen=True)
class LangSpec:
    """A synthetic language: ``perm[t]`` is the surface id of source token ``t``.

    ``difficulty`` is the fraction of content tokens the permutation moves.
    """

    lang_id: int
    perm: np.ndarray = field(repr=False)
    difficulty: float = 0.0

    def __post_init__(self):
        if not np.array_equal(np.sort(self.perm), np.arange(len(self.perm))):
            raise ContractError(f"language {self.lang_id}: perm is not a bijection")

    @property
    def inverse(self) -> np.ndarray:
        return np.argsort(self.perm)


def make_language(lang_id: int, vocab_size: int, n_special: int, difficulty: float, seed: int) -> LangSpec:
    if not 0.0 <= difficulty <= 1.0:
        raise ContractError(f"difficulty {difficulty} outside [0, 1]")
    perm = np.arange(vocab_size, dtype=np.int64)
    if lang_id == 0:
        return LangSpec(0, perm, 0.0)
    content = np.arange(n_special, vocab_size)
    k = int(round(difficulty * len(content)))
    if k >= 2:
        rng = np.random.default_rng([seed, lang_id, 2])
        moved = rng.choice(content, size=k, replace=False)
        perm[moved] = np.roll(moved, -1)  # one cycle: every chosen token moves
    return LangSpec(lang_id, perm, difficulty)


def pretraining_corpus(corpus: Corpus, seed: int, paraphrase_rate: float = 0.5) -> Corpus:
    """Sentences laid out in consecutive pairs for MLM.

    With probability ``paraphrase_rate`` the second sentence of a pair is a
    paraphrase of the first, otherwise the next corpus sentence. Context is
    drawn independently of word choice in this grammar, so paired paraphrases
    are the only MLM signal that ties synonyms together.
    """
    if not 0.0 <= paraphrase_rate <= 1.0:
        raise ContractError(f"paraphrase_rate {paraphrase_rate} outside [0, 1]")
    rng = np.random.default_rng([seed, 6])
    out: list[np.ndarray] = []
    sents = list(corpus)
    for i in range(0, len(sents) - 1, 2):
        a = sents[i]
        b = paraphrase(corpus.grammar, parse(corpus.grammar, a), rng) if rng.random() < paraphrase_rate else sents[i + 1]
        out.extend([a, np.asarray(b, dtype=np.int64)])
    return Corpus(corpus.grammar, out)


def render_corpora(corpus: Sequence[np.ndarray], languages: Sequence[LangSpec]) -> list[list[np.ndarray]]:
    """The same source sentences written in every language (MLM pretraining input)."""
    return [[spec.perm[np.asarray(sent, dtype=np.int64)] for sent in corpus] for spec in languages]


def default_difficulties(n_languages: int) -> list[float]:
    if n_languages <= 1:
        return [0.0]
    return [0.0] + [float(x) for x in np.linspace(0.4, 0.8, n_languages - 1)]


def make_languages(n_languages: int, vocab_size: int, n_special: int, seed: int,
                   difficulties: Sequence[float] | None = None) -> list[LangSpec]:
    diffs = default_difficulties(n_languages) if difficulties is None else list(difficulties)
    if len(diffs) != n_languages:
        raise ContractError("one difficulty per language required")
    return [make_language(i, vocab_size, n_special, diffs[i], seed) for i in range(n_languages)]


# --- task samples ----------------------------------------------------------


@dataclass
class TaskSample:
    tokens_a: np.ndarray
    tokens_b: np.ndarray
    label: int
    lang: int
    pair_id: int
    split: str

    def to_json(self) -> str:
        return json.dumps({
            "tokens_a": [int(t) for t in self.tokens_a],
            "tokens_b": [int(t) for t in self.tokens_b],
            "label": int(self.label),
            "lang": int(self.lang),
            "pair_id": int(self.pair_id),
            "split": self.split,
        }, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSample":
        try:
            return cls(np.asarray(d["tokens_a"], dtype=np.int64), np.asarray(d["tokens_b"], dtype=np.int64),
                       int(d["label"]), int(d["lang"]), int(d["pair_id"]), str(d["split"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed sample record: {exc}") from exc


def translate(sample: TaskSample, spec: LangSpec) -> TaskSample:
    """Relabel a source-language sample into ``spec``'s language; label and pair_id are kept."""
    if sample.lang != 0:
        raise ContractError(f"translate expects a source-language sample, got lang {sample.lang}")
    return TaskSample(spec.perm[sample.tokens_a], spec.perm[sample.tokens_b], sample.label,
                      spec.lang_id, sample.pair_id, sample.split)


@dataclass(frozen=True)
class SplitSizes:
    train: int = 2000
    val: int = 500
    test: int = 1000
    analysis: int = 1000

    def as_dict(self) -> dict[str, int]:
        return {s: getattr(self, s) for s in SPLITS}


@dataclass
class MultilingualDataset:
    samples: list[TaskSample]
    languages: list[LangSpec]

    @property
    def lang_ids(self) -> list[int]:
        return [spec.lang_id for spec in self.languages]

    def select(self, split: str, lang: int | None = None) -> list[TaskSample]:
        if lang is not None and lang not in self.lang_ids:
            raise InputError(f"unknown language id {lang}")
        return [s for s in self.samples if s.split == split and (lang is None or s.lang == lang)]

    def counts(self) -> dict[str, dict[int, int]]:
        out: dict[str, dict[int, int]] = {}
        for s in self.samples:
            out.setdefault(s.split, {}).setdefault(s.lang, 0)
            out[s.split][s.lang] += 1
        return {k: dict(sorted(v.items())) for k, v in out.items()}


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.zeros(n, dtype=np.int64)
    labels[: n // 2] = 1
    if n % 2 and rng.random() < 0.5:
        labels[n // 2] = 1
    return rng.permutation(labels)


def build_pair_task(
    corpus: Corpus,
    task_seed: int,
    n_languages: int = 4,
    sizes: SplitSizes = SplitSizes(),
    variant: str = "noisy",
    difficulties: Sequence[float] | None = None,
) -> MultilingualDataset:
    """Paraphrase-identification pairs over disjoint source sentences per split.

    Positives are paraphrases of sentence a. Negatives paraphrase a corrupted
    copy (subject/object swap, object noun replaced) or, in the ``noisy``
    variant, an unrelated sentence of the same split. Train and val hold the
    source language only. Test and analysis are translated into every language
    under a shared pair_id.
    """
    if variant not in NEGATIVE_KINDS:
        raise InputError(f"unknown task variant {variant!r}")
    need = sum(sizes.as_dict().values())
    if len(corpus) < need:
        raise InputError(f"corpus has {len(corpus)} sentences, the splits need {need}")
    grammar = corpus.grammar
    languages = make_languages(n_languages, grammar.vocab_size, grammar.n_special, grammar.seed, difficulties)
    rng = np.random.default_rng([task_seed, 3])
    order = rng.permutation(len(corpus))
    kinds = NEGATIVE_KINDS[variant]
    samples: list[TaskSample] = []
    pair_id = 0
    start = 0
    for split in SPLITS:
        n = sizes.as_dict()[split]
        pool = order[start:start + n]
        start += n
        labels = _balanced_labels(n, rng)
        for i, idx in enumerate(pool):
            a = corpus[idx]
            segs = parse(grammar, a)
            if labels[i] == 1:
                b = paraphrase(grammar, segs, rng)
            else:
                kind = kinds[rng.integers(len(kinds))]
                if kind == "mismatch":
                    other = pool[(i + 1 + rng.integers(n - 1)) % n] if n > 1 else idx
                    b = paraphrase(grammar, parse(grammar, corpus[other]), rng)
                else:
                    b = paraphrase(grammar, _corrupt(grammar, segs, kind, rng), rng)
            src = TaskSample(np.asarray(a, dtype=np.int64), b, int(labels[i]), 0, pair_id, split)
            pair_id += 1
            samples.append(src)
            if split in ("test", "analysis"):
                samples.extend(translate(src, spec) for spec in languages[1:])
    # stable layout: split, then language, then pair_id
    rank = {s: i for i, s in enumerate(SPLITS)}
    samples.sort(key=lambda s: (rank[s.split], s.lang, s.pair_id))
    return MultilingualDataset(samples, languages)


def encode_pair(sample: TaskSample, cfg: ModelConfig) -> np.ndarray:
    seq = np.concatenate([[cfg.cls_token_id], sample.tokens_a, [cfg.sep_token_id], sample.tokens_b])
    if len(seq) > cfg.max_seq:
        raise InputError(f"pair of length {len(seq)} exceeds max_seq {cfg.max_seq}")
    return seq.astype(np.int64)


def pad_batch(seqs: Sequence[np.ndarray], pad_id: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


# --- masked-LM corruption --------------------------------------------------


@dataclass
class MLMBatch:
    tokens: np.ndarray  # corrupted input [B, S]
    rows: np.ndarray  # target coordinates
    cols: np.ndarray
    targets: np.ndarray  # original ids at (rows, cols)


def mlm_sequences(corpora: Sequence[Sequence[np.ndarray]], cfg: ModelConfig) -> list[np.ndarray]:
    """``[CLS] s1 [SEP] s2`` from consecutive sentence pairs of every language's corpus."""
    seqs = []
    for corpus in corpora:
        sents = list(corpus)
        for i in range(0, len(sents) - 1, 2):
            seq = np.concatenate([[cfg.cls_token_id], sents[i], [cfg.sep_token_id], sents[i + 1]])
            if len(seq) > cfg.max_seq:
                raise InputError(f"MLM sequence of length {len(seq)} exceeds max_seq")
            seqs.append(seq.astype(np.int64))
    return seqs


def corrupt_tokens(tokens: np.ndarray, cfg: ModelConfig, mask_rate: float, rng: np.random.Generator):
    """BERT-style 80/10/10 corruption of content tokens. Returns (corrupted, selected mask)."""
    if not 0.0 < mask_rate < 1.0:
        raise ContractError(f"mask_rate {mask_rate} outside (0, 1)")
    content = ~np.isin(tokens, cfg.special_ids)
    chosen = content & (rng.random(tokens.shape) < mask_rate)
    action = rng.random(tokens.shape)
    out = tokens.copy()
    out[chosen & (action < 0.8)] = cfg.mask_token_id
    rand_pos = chosen & (action >= 0.8) & (action < 0.9)
    out[rand_pos] = rng.integers(cfg.n_special, cfg.vocab_size, size=int(rand_pos.sum()))
    return out, chosen


def build_mlm_batches(
    corpora: Sequence[Sequence[np.ndarray]],
    cfg: ModelConfig,
    mask_rate: float = 0.15,
    seed: int = 0,
    batch_size: int = 32,
) -> list[MLMBatch]:
    """One shuffled epoch of corrupted batches over all languages' corpora."""
    if not 0.0 < mask_rate < 1.0:
        raise ContractError(f"mask_rate {mask_rate} outside (0, 1)")
    seqs = mlm_sequences(corpora, cfg)
    rng = np.random.default_rng([seed, 4])
    order = rng.permutation(len(seqs))
    batches = []
    for start in range(0, len(order), batch_size):
        tokens = pad_batch([seqs[i] for i in order[start:start + batch_size]], cfg.pad_token_id)
        corrupted, chosen = corrupt_tokens(tokens, cfg, mask_rate, rng)
        rows, cols = np.nonzero(chosen)
        batches.append(MLMBatch(corrupted, rows, cols, tokens[rows, cols]))
    return batches
