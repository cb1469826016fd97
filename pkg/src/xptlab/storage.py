"""On-disk formats: JSONL datasets with a manifest, and long-form report CSVs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError
from .synthlang import SPLITS, LangSpec, MultilingualDataset, TaskSample

MANIFEST = "manifest.json"
MLM_FILE = "pretrain.jsonl"


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_dataset(data: MultilingualDataset, mlm_corpora: Sequence[Sequence[np.ndarray]], out_dir,
                  meta: dict) -> dict:
    """One JSONL file per split, the pretraining corpus, and a manifest. Returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    line_counts = {}
    for split in SPLITS:
        samples = [s for s in data.samples if s.split == split]
        with open(out / f"{split}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for s in samples:
                fh.write(s.to_json() + "\n")
        line_counts[split] = len(samples)
    n_mlm = 0
    with open(out / MLM_FILE, "w", encoding="utf-8", newline="\n") as fh:
        for lang, corpus in enumerate(mlm_corpora):
            for sent in corpus:
                fh.write(_dump({"lang": lang, "tokens": [int(t) for t in sent]}) + "\n")
                n_mlm += 1
    manifest = {
        "counts": {split: {str(k): v for k, v in per.items()} for split, per in data.counts().items()},
        "lines": line_counts,
        "pretrain_lines": n_mlm,
        "languages": [{"lang_id": spec.lang_id, "difficulty": spec.difficulty, "perm": spec.perm.tolist()}
                      for spec in data.languages],
        **meta,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise InputError(f"no dataset at {data_dir} (missing {MANIFEST}); run `xptlab gen` first")
    return json.loads(path.read_text(encoding="utf-8"))


def read_dataset(data_dir) -> MultilingualDataset:
    manifest = read_manifest(data_dir)
    languages = [LangSpec(int(l["lang_id"]), np.asarray(l["perm"], dtype=np.int64), float(l["difficulty"]))
                 for l in manifest["languages"]]
    samples: list[TaskSample] = []
    for split in SPLITS:
        path = Path(data_dir) / f"{split}.jsonl"
        if not path.exists():
            raise InputError(f"missing dataset file {path}")
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise InputError(f"{path}:{line_no}: {exc}") from None
                s = TaskSample.from_dict(rec)
                if s.split != split:
                    raise InputError(f"{path}:{line_no}: split {s.split!r} in the {split} file")
                samples.append(s)
        if sum(1 for s in samples if s.split == split) != manifest["lines"][split]:
            raise InputError(f"{path}: line count disagrees with the manifest")
    return MultilingualDataset(samples, languages)


def read_mlm_corpora(data_dir) -> list[list[np.ndarray]]:
    path = Path(data_dir) / MLM_FILE
    if not path.exists():
        raise InputError(f"missing pretraining corpus {path}")
    corpora: dict[int, list[np.ndarray]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            try:
                rec = json.loads(line)
                corpora.setdefault(int(rec["lang"]), []).append(np.asarray(rec["tokens"], dtype=np.int64))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{line_no}: {exc}") from None
    return [corpora[k] for k in sorted(corpora)]


# --- reports -------------------------------------------------------------------

REPORT_COLUMNS = ("metric", "method", "lang_or_pair", "seed", "value", "config_hash")
AGG_COLUMNS = ("metric", "method", "lang_or_pair", "n", "mean", "std", "config_hash")


@dataclass(frozen=True)
class ReportRow:
    metric: str
    method: str
    lang_or_pair: str
    seed: int
    value: float | str  # str only for the undefined rel-diff marker


def _cell(v) -> str:
    return v if isinstance(v, str) else repr(float(v))


def write_report_csv(rows: Iterable[ReportRow], path, config_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r.metric, r.method, r.lang_or_pair, r.seed, _cell(r.value), config_hash])


def read_report_csv(path) -> tuple[list[ReportRow], str]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != REPORT_COLUMNS:
        raise InputError(f"{path}: not a report file")
    out = []
    hashes = set()
    for line_no, r in enumerate(rows[1:], start=2):
        if len(r) != len(REPORT_COLUMNS):
            raise InputError(f"{path}:{line_no}: expected {len(REPORT_COLUMNS)} fields")
        try:
            value: float | str = float(r[4])
        except ValueError:
            value = r[4]
        out.append(ReportRow(r[0], r[1], r[2], int(r[3]), value))
        hashes.add(r[5])
    if len(hashes) > 1:
        raise InputError(f"{path}: rows from different configs")
    return out, hashes.pop() if hashes else ""


def aggregate(rows: Iterable[ReportRow]) -> list[tuple[str, str, str, int, float, float]]:
    """Mean and sample std over seeds for every (metric, method, lang_or_pair); text cells skipped."""
    groups: dict[tuple[str, str, str], list[float]] = {}
    for r in rows:
        if isinstance(r.value, str):
            continue
        groups.setdefault((r.metric, r.method, r.lang_or_pair), []).append(float(r.value))
    out = []
    for key in sorted(groups):
        vals = groups[key]
        mean = math.fsum(vals) / len(vals)
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)) if len(vals) > 1 else 0.0
        out.append((*key, len(vals), mean, std))
    return out


def write_aggregate_csv(agg, path, config_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGG_COLUMNS)
        for metric, method, key, n, mean, std in agg:
            w.writerow([metric, method, key, n, repr(mean), repr(std), config_hash])
