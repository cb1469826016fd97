"""Representation geometry: how much tuning moves CLS vectors, how well
translations line up across languages, and the source-vs-rest transfer gap."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .encoder import EncoderParams, cls_rows, encode
from .errors import ContractError, InputError
from .prompts import DeepPrompt, as_past_kv
from .synthlang import MultilingualDataset, encode_pair, pad_batch

TAGS = ("frozen", "finetuned", "prompttuned")
UNDEFINED = "undefined"  # rel_diff marker when the non-translation mean is exactly 0
REP_BATCH = 250


@dataclass
class RepMatrix:
    """CLS representations of one language, one row per sample."""

    lang: int
    reps: np.ndarray = field(repr=False)
    pair_ids: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    tag: str = "frozen"

    def __post_init__(self):
        self.reps = np.asarray(self.reps, dtype=np.float64)
        self.pair_ids = np.asarray(self.pair_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.tag not in TAGS:
            raise ContractError(f"tag must be one of {TAGS}, got {self.tag!r}")
        if self.reps.ndim != 2:
            raise ContractError(f"reps must be 2-D, got shape {self.reps.shape}")
        n = self.reps.shape[0]
        if self.pair_ids.shape != (n,) or self.labels.shape != (n,):
            raise ContractError("pair_ids and labels need one entry per row")
        if not np.all(np.isfinite(self.reps)):
            raise ContractError("representations must be finite")
        if len(np.unique(self.pair_ids)) != n:
            raise ContractError("pair_ids must be unique within a language")

    def __len__(self) -> int:
        return self.reps.shape[0]

    def sorted(self) -> "RepMatrix":
        order = np.argsort(self.pair_ids, kind="stable")
        return RepMatrix(self.lang, self.reps[order], self.pair_ids[order], self.labels[order], self.tag)


# --- matrix CSV -----------------------------------------------------------
# Columns: lang, pair_id, label, tag, x0 .. x{d-1}. Floats use repr, so a
# write/read round trip is exact.


def write_reps_csv(mats: Sequence[RepMatrix], path) -> None:
    if not mats:
        raise InputError("nothing to write")
    d = mats[0].reps.shape[1]
    if any(m.reps.shape[1] != d for m in mats):
        raise InputError("all matrices must share one width")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lang", "pair_id", "label", "tag"] + [f"x{j}" for j in range(d)])
        for m in mats:
            for i in range(len(m)):
                w.writerow([m.lang, int(m.pair_ids[i]), int(m.labels[i]), m.tag]
                           + [repr(float(x)) for x in m.reps[i]])


def read_reps_csv(path) -> list[RepMatrix]:
    """Matrices grouped by (lang, tag) in first-appearance order."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:4] != ["lang", "pair_id", "label", "tag"]:
        raise InputError(f"{path}: not a representation matrix file")
    d = len(rows[0]) - 4
    groups: dict[tuple[int, str], list[list[str]]] = {}
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != d + 4:
            raise InputError(f"{path}:{line_no}: expected {d + 4} fields, got {len(row)}")
        try:
            key = (int(row[0]), row[3])
        except ValueError as exc:
            raise InputError(f"{path}:{line_no}: {exc}") from None
        groups.setdefault(key, []).append(row)
    out = []
    for (lang, tag), grp in groups.items():
        try:
            reps = np.array([[float(x) for x in r[4:]] for r in grp]).reshape(len(grp), d)
            pids = [int(r[1]) for r in grp]
            labels = [int(r[2]) for r in grp]
        except ValueError as exc:
            raise InputError(f"{path}: {exc}") from None
        out.append(RepMatrix(lang, reps, pids, labels, tag))
    return out


# --- metrics ------------------------------------------------------------------


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ContractError(f"length mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ContractError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ContractError("cosine of a zero vector is undefined")
    return x / norms[:, None]


def _matched(a: RepMatrix, b: RepMatrix) -> tuple[RepMatrix, RepMatrix]:
    a, b = a.sorted(), b.sorted()
    if len(a) != len(b) or not np.array_equal(a.pair_ids, b.pair_ids):
        raise InputError("matrices do not cover the same pair_ids")
    return a, b


def rep_change(before: RepMatrix, after: RepMatrix) -> float:
    """Mean per-sample cosine between matched rows, in percent."""
    if before.lang != after.lang:
        raise InputError(f"language mismatch: {before.lang} vs {after.lang}")
    before, after = _matched(before, after)
    cos = np.sum(_unit_rows(before.reps) * _unit_rows(after.reps), axis=1)
    return 100.0 * math.fsum(np.clip(cos, -1.0, 1.0)) / len(cos)


@dataclass(frozen=True)
class AlignmentStats:
    pos_avg: float
    neg_avg: float
    rel_diff: float | None  # None when neg_avg == 0
    n_pos: int = 0
    n_neg: int = 0

    def rel_diff_percent(self) -> float | str:
        return UNDEFINED if self.rel_diff is None else 100.0 * self.rel_diff


def rel_diff(pos_avg: float, neg_avg: float) -> float | None:
    """``(pos - neg) / neg``; ``None`` when ``neg`` is 0."""
    if neg_avg == 0:
        return None
    return (pos_avg - neg_avg) / neg_avg


def alignment(src: RepMatrix, tgt: RepMatrix) -> AlignmentStats:
    """Translation-pair vs non-translation cosine averages between two languages.

    Positives are the n rows matched by pair_id; negatives are every cross
    pair (i, j) with different pair_ids, i.e. n(n-1) cosines.
    """
    src, tgt = _matched(src, tgt)
    n = len(src)
    if n < 2:
        raise InputError("alignment needs at least two samples per language")
    a, b = _unit_rows(src.reps), _unit_rows(tgt.reps)
    gram = a @ b.T
    diag = np.diagonal(gram).copy()
    pos_sum = math.fsum(diag)
    # per-row pairwise sums, then one compensated sum across rows
    neg_sum = math.fsum(gram.sum(axis=1) - diag)
    pos = pos_sum / n
    neg = neg_sum / (n * (n - 1))
    return AlignmentStats(pos, neg, rel_diff(pos, neg), n, n * (n - 1))


def transfer_gap(scores: Mapping[int, float], source_lang: int = 0) -> float:
    """Source score minus the mean of every other language's score."""
    if source_lang not in scores:
        raise InputError(f"source language {source_lang} missing from scores")
    others = [float(v) for k, v in scores.items() if k != source_lang]
    if not others:
        raise InputError("need at least one non-source language")
    return float(scores[source_lang]) - math.fsum(others) / len(others)


@dataclass(frozen=True)
class GapEntry:
    source: float
    others_mean: float
    gap: float


@dataclass
class GapReport:
    entries: dict[str, GapEntry]
    langs: tuple[int, ...]

    @classmethod
    def build(cls, scores_by_method: Mapping[str, Mapping[int, float]], source_lang: int = 0) -> "GapReport":
        lang_sets = {tuple(sorted(s)) for s in scores_by_method.values()}
        if len(lang_sets) != 1:
            raise InputError("methods were scored on different language sets")
        entries = {}
        for method, scores in scores_by_method.items():
            others = [float(v) for k, v in scores.items() if k != source_lang]
            g = transfer_gap(scores, source_lang)
            entries[method] = GapEntry(float(scores[source_lang]), math.fsum(others) / len(others), g)
        return cls(entries, lang_sets.pop())


# --- representation collection -------------------------------------------


def collect_reps(
    params: EncoderParams,
    prompt: DeepPrompt | None,
    data: MultilingualDataset,
    lang: int,
    tag: str = "frozen",
    split: str = "analysis",
) -> RepMatrix:
    """CLS vectors for every ``split`` sample of ``lang``, in pair_id order.

    ``frozen`` and ``finetuned`` take no prompt; ``prompttuned`` runs with the
    prompt attached, as at inference time.
    """
    if tag not in TAGS:
        raise ContractError(f"tag must be one of {TAGS}, got {tag!r}")
    if (tag == "prompttuned") != (prompt is not None):
        raise ContractError(f"tag {tag!r} {'needs' if tag == 'prompttuned' else 'takes no'} prompt")
    samples = sorted(data.select(split, lang), key=lambda s: s.pair_id)
    if not samples:
        raise InputError(f"no {split} samples for language {lang}")
    cfg = params.config
    seqs = [encode_pair(s, cfg) for s in samples]
    past = None if prompt is None else as_past_kv(prompt)
    out = np.empty((len(seqs), cfg.d_model))
    lengths = np.array([len(s) for s in seqs])
    order = np.argsort(lengths, kind="stable")
    with T.precision(np.float64):
        for start in range(0, len(order), REP_BATCH):
            idx = order[start:start + REP_BATCH]
            tokens = pad_batch([seqs[i] for i in idx], cfg.pad_token_id)
            out[idx] = cls_rows(encode(params.arrays, cfg, tokens, past, cls_only=True)).data
    return RepMatrix(lang, out, [s.pair_id for s in samples], [s.label for s in samples], tag)


def format_stats(stats: AlignmentStats) -> str:
    rd = stats.rel_diff_percent()
    rd_text = rd if isinstance(rd, str) else f"{rd:.1f}%"
    return f"pos {100 * stats.pos_avg:.1f}% neg {100 * stats.neg_avg:.1f}% rel-diff {rd_text}"
