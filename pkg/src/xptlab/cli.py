"""Command-line pipeline: gen, pretrain, tune, eval, analyze, report and the end-to-end run.

A run directory holds every artifact:

    config.json                 the experiment config (written by gen)
    data/                       JSONL splits, pretraining corpus, manifest
    pretrained.ckpt             MLM backbone
    lr/{ft,pt}.json             learning rate picked by the probe grid
    runs/{mode}_seed{s}.ckpt    tuned checkpoint, plus .history.json
    analysis/seed{s}/           reps CSVs, eval JSON, report.csv, panels.svg
    aggregate.csv, summary.json mean/std over seeds and the directional checks

Exit codes: 0 success, 2 bad input or config, 3 invariant breach, 4 I/O or
checkpoint failure. ``XPTLAB_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ck
from .config import ExperimentConfig, load_config
from .encoder import EncoderParams
from .errors import CheckpointError, ContractError, InputError, InvariantError
from .geometry import GapReport, RepMatrix, alignment, collect_reps, rep_change, write_reps_csv
from .projection import Panel, boundary_alignment, emit_scatter, fit_boundaries, run_tsne
from .prompts import tuned_param_ratio
from .storage import (ReportRow, aggregate, read_dataset, read_manifest, read_mlm_corpora, read_report_csv,
                      write_aggregate_csv, write_dataset, write_report_csv)
from .synthlang import MultilingualDataset, build_pair_task, gen_base_corpus, pretraining_corpus, render_corpora
from .tuning import FINETUNE, MODES, PROMPTTUNE, Checkpoint, RunHistory, evaluate, pretrain, select_lr, train

log = logging.getLogger("xptlab")

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT, EXIT_IO = 0, 2, 3, 4
METHOD_TAGS = {"frozen": "frozen", FINETUNE: "finetuned", PROMPTTUNE: "prompttuned"}
Logger = Callable[[str], None]


# --- run-directory layout ------------------------------------------------------


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    config = property(lambda self: self.root / "config.json")
    data = property(lambda self: self.root / "data")
    pretrained = property(lambda self: self.root / "pretrained.ckpt")
    aggregate = property(lambda self: self.root / "aggregate.csv")
    summary = property(lambda self: self.root / "summary.json")

    def lr(self, mode: str) -> Path:
        return self.root / "lr" / f"{mode}.json"

    def run(self, mode: str, seed: int) -> Path:
        return self.root / "runs" / f"{mode}_seed{seed}.ckpt"

    def history(self, mode: str, seed: int) -> Path:
        return self.root / "runs" / f"{mode}_seed{seed}.history.json"

    def analysis(self, seed: int) -> Path:
        return self.root / "analysis" / f"seed{seed}"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise InputError(f"{path} exists; pass --force to overwrite")


def resolve_config(rd: RunDir, config_path=None) -> ExperimentConfig:
    """The run's stored config; a --config that disagrees with it is rejected."""
    if not rd.config.exists():
        if config_path is None:
            raise InputError(f"{rd.root} has no config.json; run `xptlab gen` first")
        return load_config(config_path)
    stored = load_config(rd.config)
    if config_path is not None:
        given = load_config(config_path)
        if given.hash() != stored.hash():
            raise InputError(f"config hash {given.hash()} differs from the run's {stored.hash()}")
    return stored


# --- stages --------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, rd: RunDir, force: bool = False) -> dict:
    """Task splits and the pretraining corpus, all written as JSONL with a manifest."""
    if rd.data.exists() and any(rd.data.iterdir()) and not force:
        raise InputError(f"{rd.data} is not empty; pass --force to regenerate")
    dc = cfg.data
    m = cfg.model
    corpus = gen_base_corpus(dc.task_sentences, dc.grammar_seed, m.vocab_size, m.n_special)
    data = build_pair_task(corpus, dc.task_seed, dc.n_languages, dc.sizes, dc.variant, dc.difficulties)
    src = gen_base_corpus(dc.pretrain_sentences, dc.grammar_seed, m.vocab_size, m.n_special,
                          sample_seed=dc.pretrain_sample_seed)
    mlm = render_corpora(pretraining_corpus(src, dc.task_seed, dc.paraphrase_rate), data.languages)
    meta = {"config_hash": cfg.hash(), "grammar_seed": dc.grammar_seed, "task_seed": dc.task_seed,
            "pretrain_sample_seed": dc.pretrain_sample_seed, "variant": dc.variant}
    manifest = write_dataset(data, mlm, rd.data, meta)
    rd.config.write_text(cfg.to_json(), encoding="utf-8")
    return manifest


def load_data(cfg: ExperimentConfig, rd: RunDir) -> MultilingualDataset:
    manifest = read_manifest(rd.data)
    if manifest.get("config_hash") != cfg.hash():
        raise InputError(f"dataset was generated under config {manifest.get('config_hash')}, not {cfg.hash()}")
    return read_dataset(rd.data)


def cmd_pretrain(cfg: ExperimentConfig, rd: RunDir, force: bool = False, echo: Logger | None = None) -> Checkpoint:
    _refuse_overwrite(rd.pretrained, force)
    load_data(cfg, rd)
    corpora = read_mlm_corpora(rd.data)
    model = EncoderParams.init(cfg.model, cfg.pretrain.seed)
    t0 = time.perf_counter()
    model, losses = pretrain(model, corpora, cfg.pretrain, echo)
    ckpt = Checkpoint(cfg.model, model, None, None, cfg.pretrain.seed,
                      {"mlm_loss": losses, "seconds": time.perf_counter() - t0, "config_hash": cfg.hash()})
    ck.write_checkpoint(ckpt, rd.pretrained)
    return ckpt


def _read_pretrained(rd: RunDir) -> Checkpoint:
    if not rd.pretrained.exists():
        raise InputError(f"{rd.pretrained} missing; run `xptlab pretrain` first")
    return ck.read_checkpoint(rd.pretrained)


def cmd_select_lr(cfg: ExperimentConfig, rd: RunDir, mode: str, echo: Logger | None = None) -> float:
    """Grid-selected learning rate for ``mode``, cached in the run directory."""
    path = rd.lr(mode)
    if path.exists():
        rec = json.loads(path.read_text(encoding="utf-8"))
        if rec.get("config_hash") == cfg.hash():
            return float(rec["lr"])
    data = load_data(cfg, rd)
    base = _read_pretrained(rd)
    h = cfg.hyper.with_(mode=mode, seed=cfg.seeds[0])
    best, scores = select_lr(base.params, data, h, cfg.prompt, echo)
    _write_json(path, {"mode": mode, "lr": best, "seed": h.seed, "probe_epochs": h.probe_epochs,
                       "scores": {repr(k): (v if math.isfinite(v) else None) for k, v in scores.items()},
                       "config_hash": cfg.hash()})
    return best


def cmd_tune(cfg: ExperimentConfig, rd: RunDir, mode: str, seed: int, force: bool = False,
             lr: float | None = None, echo: Logger | None = None) -> tuple[Checkpoint, RunHistory]:
    """Train one run and persist it. Prompt tuning re-reads both checkpoints from
    disk and compares the serialized backbones byte for byte."""
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}")
    out = rd.run(mode, seed)
    _refuse_overwrite(out, force)
    data = load_data(cfg, rd)
    base = _read_pretrained(rd)
    if lr is None:
        lr = cmd_select_lr(cfg, rd, mode, echo)
    h = cfg.hyper.with_(mode=mode, seed=seed, lr=lr)
    prompt_cfg = replace(cfg.prompt, seed=seed)
    ckpt, hist = train(base.params, data, h, prompt_cfg, echo)
    ckpt.manifest["config_hash"] = cfg.hash()
    out.parent.mkdir(parents=True, exist_ok=True)
    ck.write_checkpoint(ckpt, out)
    _write_json(rd.history(mode, seed), hist.to_dict())
    if mode == PROMPTTUNE:
        verify_frozen(rd.pretrained, out)
    return ckpt, hist


def verify_frozen(pretrained_path, tuned_path) -> None:
    before = ck.backbone_bytes(ck.read_checkpoint(pretrained_path).params)
    after = ck.backbone_bytes(ck.read_checkpoint(tuned_path).params)
    if before != after:
        raise InvariantError(f"backbone of {tuned_path} differs from {pretrained_path}")


def cmd_eval(ckpt_path, data: MultilingualDataset, split: str = "test") -> dict:
    ckpt = ck.read_checkpoint(ckpt_path)
    scores = evaluate(ckpt.params, ckpt.prompt, data, split=split)
    return {"checkpoint": str(ckpt_path), "split": split, "accuracy": {str(k): v for k, v in scores.items()}}


def _tsne_subset(data: MultilingualDataset, per_lang: int, seed: int) -> np.ndarray:
    """Analysis pair_ids shared by every language, drawn once per seed."""
    ids = np.array(sorted(s.pair_id for s in data.select("analysis", 0)))
    rng = np.random.default_rng([seed, 7])
    return np.sort(rng.choice(ids, size=min(per_lang, len(ids)), replace=False))


def _stack(mats: Sequence[RepMatrix], keep: np.ndarray):
    X, labels, langs = [], [], []
    for m in mats:
        sel = np.isin(m.pair_ids, keep)
        X.append(m.reps[sel])
        labels.append(m.labels[sel])
        langs.append(np.full(int(sel.sum()), m.lang))
    return np.vstack(X), np.concatenate(labels), np.concatenate(langs)


def cmd_analyze(cfg: ExperimentConfig, rd: RunDir, seed: int, echo: Logger | None = None) -> list[ReportRow]:
    """Representation change, cross-lingual alignment, transfer gaps, t-SNE
    panels with per-language boundaries, and tuned-parameter ratios."""
    data = load_data(cfg, rd)
    frozen = _read_pretrained(rd)
    tuned = {}
    for mode in MODES:
        path = rd.run(mode, seed)
        if not path.exists():
            raise InputError(f"{path} missing; run `xptlab tune --mode {mode} --seed {seed}` first")
        tuned[mode] = ck.read_checkpoint(path)
    out = rd.analysis(seed)
    out.mkdir(parents=True, exist_ok=True)
    langs = data.lang_ids
    rows: list[ReportRow] = []

    def add(metric, method, key, value):
        rows.append(ReportRow(metric, method, str(key), seed, value))

    reps: dict[str, list[RepMatrix]] = {}
    sources = {"frozen": (frozen.params, None), FINETUNE: (tuned[FINETUNE].params, None),
               PROMPTTUNE: (tuned[PROMPTTUNE].params, tuned[PROMPTTUNE].prompt)}
    for method, (params, prompt) in sources.items():
        reps[method] = [collect_reps(params, prompt, data, lang, METHOD_TAGS[method]) for lang in langs]
        write_reps_csv(reps[method], out / f"reps_{method}.csv")
    for mode in MODES:
        for before, after in zip(reps["frozen"], reps[mode]):
            add("rep_change", mode, before.lang, rep_change(before, after))
    for method in reps:
        for lang in langs[1:]:
            st = alignment(reps[method][0], reps[method][lang])
            pair = f"{langs[0]}-{lang}"
            add("align_pos", method, pair, 100.0 * st.pos_avg)
            add("align_neg", method, pair, 100.0 * st.neg_avg)
            add("rel_diff", method, pair, st.rel_diff_percent())

    scores = {mode: evaluate(tuned[mode].params, tuned[mode].prompt, data) for mode in MODES}
    _write_json(out / "eval.json", {mode: {str(k): v for k, v in s.items()} for mode, s in scores.items()})
    for mode, s in scores.items():
        for lang, acc in s.items():
            add("test_acc", mode, lang, 100.0 * acc)
    gaps = GapReport.build({m: {k: 100.0 * v for k, v in s.items()} for m, s in scores.items()})
    for mode, entry in gaps.entries.items():
        add("gap", mode, "all", entry.gap)

    keep = _tsne_subset(data, cfg.analysis.tsne_per_lang, seed)
    tcfg = replace(cfg.analysis.tsne, seed=seed)
    panels = []
    for method in reps:
        X, labels, lang_ids = _stack(reps[method], keep)
        t0 = time.perf_counter()
        Y = run_tsne(X, tcfg).embedding
        bounds, pts, labs = fit_boundaries(Y, labels, lang_ids, cfg.analysis.l2)
        score = boundary_alignment(bounds, pts, labs)
        add("boundary_angle_deg", method, "all", math.degrees(score.mean_angle))
        add("boundary_cross_acc", method, "all", 100.0 * score.mean_cross_accuracy)
        panels.append(Panel(method, Y, labels, lang_ids, bounds))
        if echo:
            echo(f"[analyze seed {seed}] t-SNE {method}: {len(X)} points in {time.perf_counter() - t0:.1f}s, "
                 f"boundary angle {math.degrees(score.mean_angle):.1f} deg")
    emit_scatter(panels, out / "panels.svg")

    pt = tuned[PROMPTTUNE]
    ratios = pt.ratios()
    p = pt.params
    recomputed = tuned_param_ratio(pt.prompt.count(), p.count(p.head_names), p.count(p.backbone_names))
    if recomputed != ratios["prompt_and_head"]:
        raise InvariantError("stored parameter ratio disagrees with a recount")
    add("ratio", PROMPTTUNE, "prompt_only", 100.0 * ratios["prompt_only"])
    add("ratio", PROMPTTUNE, "prompt_and_head", 100.0 * ratios["prompt_and_head"])
    write_report_csv(rows, out / "report.csv", cfg.hash())
    return rows


def directional_checks(rows: Sequence[ReportRow], langs: Sequence[int]) -> dict:
    """Per-seed FT vs PT comparisons: rep change, gap and rel-diff."""
    seeds = sorted({r.seed for r in rows})
    get = {(r.metric, r.method, r.lang_or_pair, r.seed): r.value for r in rows}
    pairs = [f"{langs[0]}-{l}" for l in langs[1:]]

    def count(pred) -> int:
        return sum(1 for s in seeds if pred(s))

    def smaller(a, b) -> bool:
        return not isinstance(a, str) and not isinstance(b, str) and a < b

    rep = count(lambda s: all(get[("rep_change", PROMPTTUNE, str(l), s)] > get[("rep_change", FINETUNE, str(l), s)]
                              for l in langs))
    rel = count(lambda s: all(smaller(get[("rel_diff", PROMPTTUNE, p, s)], get[("rel_diff", FINETUNE, p, s)])
                              for p in pairs))
    gap = {m: math.fsum(get[("gap", m, "all", s)] for s in seeds) / len(seeds) for m in MODES}
    need = math.ceil(0.8 * len(seeds))
    return {
        "seeds": seeds,
        "rep_change_pt_gt_ft_seeds": rep,
        "rel_diff_pt_lt_ft_seeds": rel,
        "mean_gap": gap,
        "rep_change_ok": rep >= need,
        "rel_diff_ok": rel >= need,
        "gap_ok": gap[PROMPTTUNE] <= gap[FINETUNE],
    }


def cmd_report(cfg: ExperimentConfig, rd: RunDir) -> dict:
    rows: list[ReportRow] = []
    for seed in cfg.seeds:
        path = rd.analysis(seed) / "report.csv"
        if not path.exists():
            raise InputError(f"{path} missing; run `xptlab analyze --seed {seed}` first")
        seed_rows, h = read_report_csv(path)
        if h != cfg.hash():
            raise InputError(f"{path} was produced under config {h}, not {cfg.hash()}")
        rows.extend(seed_rows)
    write_aggregate_csv(aggregate(rows), rd.aggregate, cfg.hash())
    langs = list(range(cfg.data.n_languages))
    summary = {"config_hash": cfg.hash(), **directional_checks(rows, langs)}
    _write_json(rd.summary, summary)
    return summary


def run_pipeline(cfg: ExperimentConfig, rd: RunDir, force: bool = False, echo: Logger | None = None) -> dict:
    """Every stage in order, skipping artifacts that already exist unless forced."""
    timings = {}
    t0 = time.perf_counter()
    if force or not (rd.data / "manifest.json").exists():
        cmd_gen(cfg, rd, force=True)
    timings["gen"] = time.perf_counter() - t0
    t = time.perf_counter()
    if force or not rd.pretrained.exists():
        cmd_pretrain(cfg, rd, force=True, echo=echo)
    timings["pretrain"] = time.perf_counter() - t
    t = time.perf_counter()
    lrs = {mode: cmd_select_lr(cfg, rd, mode, echo) for mode in MODES}
    timings["select_lr"] = time.perf_counter() - t
    t = time.perf_counter()
    for seed in cfg.seeds:
        for mode in MODES:
            if force or not rd.run(mode, seed).exists():
                cmd_tune(cfg, rd, mode, seed, force=True, lr=lrs[mode], echo=echo)
    timings["tune"] = time.perf_counter() - t
    t = time.perf_counter()
    for seed in cfg.seeds:
        cmd_analyze(cfg, rd, seed, echo)
    timings["analyze"] = time.perf_counter() - t
    summary = cmd_report(cfg, rd)
    summary["lr"] = lrs
    summary["seconds"] = {**timings, "total": time.perf_counter() - t0}
    _write_json(rd.summary, summary)
    return summary


# --- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xptlab", description="Prompt tuning vs fine-tuning on synthetic languages")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False, mode=False):
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--config", help="config JSON (defaults to the run's stored config)")
        sp.add_argument("--force", action="store_true", help="overwrite existing artifacts")
        sp.add_argument("-v", "--verbose", action="store_true", help="per-epoch progress")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if mode:
            sp.add_argument("--mode", choices=MODES, required=True)
        return sp

    common(sub.add_parser("gen", help="generate datasets and the pretraining corpus"))
    common(sub.add_parser("pretrain", help="masked-LM pretraining of the backbone"))
    sp = common(sub.add_parser("tune", help="fine-tune or prompt-tune one seed"), seed=True, mode=True)
    sp.add_argument("--lr", type=float, help="skip the grid and use this rate")
    sp = common(sub.add_parser("eval", help="per-language accuracy of a tuned checkpoint"), seed=True, mode=True)
    sp.add_argument("--split", default="test", choices=("val", "test", "analysis"))
    common(sub.add_parser("analyze", help="geometry, gaps, t-SNE panels for one seed"), seed=True)
    common(sub.add_parser("report", help="aggregate per-seed reports"))
    common(sub.add_parser("pipeline", help="run every stage for every configured seed"))
    return p


def _dispatch(args, echo: Logger) -> int:
    rd = RunDir(args.out)
    progress = echo if args.verbose else None
    if args.command == "gen":
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if rd.config.exists() and not args.force and load_config(rd.config).hash() != cfg.hash():
            raise InputError(f"{rd.root} belongs to another config; pass --force to replace it")
        rd.root.mkdir(parents=True, exist_ok=True)
        manifest = cmd_gen(cfg, rd, args.force)
        echo(f"wrote {sum(manifest['lines'].values())} task pairs and {manifest['pretrain_lines']} "
             f"pretraining sentences to {rd.data} (config {cfg.hash()})")
        return EXIT_OK
    if args.command == "pipeline" and not rd.config.exists() and not args.config:
        cfg = ExperimentConfig()
    else:
        cfg = resolve_config(rd, args.config)
    if args.command == "pretrain":
        ckpt = cmd_pretrain(cfg, rd, args.force, progress)
        echo(f"final mlm loss {ckpt.manifest['mlm_loss'][-1]:.4f}; wrote {rd.pretrained}")
    elif args.command == "tune":
        ckpt, hist = cmd_tune(cfg, rd, args.mode, args.seed, args.force, args.lr, progress)
        final = hist.test_acc[max(hist.test_acc)] if hist.test_acc else {}
        echo(f"{args.mode} seed {args.seed}: train acc {hist.final_train_acc:.3f}, test "
             + " ".join(f"{k}:{v:.3f}" for k, v in final.items()))
    elif args.command == "eval":
        res = cmd_eval(rd.run(args.mode, args.seed), load_data(cfg, rd), args.split)
        path = rd.analysis(args.seed) / f"eval_{args.mode}_{args.split}.json"
        _refuse_overwrite(path, args.force)
        _write_json(path, res)
        echo(json.dumps(res["accuracy"]))
    elif args.command == "analyze":
        cmd_analyze(cfg, rd, args.seed, progress)
        echo(f"wrote {rd.analysis(args.seed)}")
    elif args.command == "report":
        echo(json.dumps(cmd_report(cfg, rd), indent=1))
    elif args.command == "pipeline":
        if not rd.config.exists():
            rd.root.mkdir(parents=True, exist_ok=True)
            rd.config.write_text(cfg.to_json(), encoding="utf-8")
        echo(json.dumps(run_pipeline(cfg, rd, args.force, progress), indent=1))
    return EXIT_OK


def thread_cap(value: str | None):
    """Limit BLAS threads to ``value``; no limit when unset."""
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        n = 0
    if n < 1:
        raise InputError(f"XPTLAB_THREADS must be a positive integer, got {value!r}")
    return threadpool_limits(limits=n)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    echo = print
    try:
        with thread_cap(os.environ.get("XPTLAB_THREADS")):
            return _dispatch(args, echo)
    except (InputError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
