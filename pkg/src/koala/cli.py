"""Command-line entry point: ``koala <command> --config PATH [--seed N] [--mode M] [--out DIR]``.

Exit codes: 0 success, 1 contract violation, 2 bad input.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import MODES, load_config
from .datapipe import Corpus, generate_synthetic_corpus, make_sample, read_jsonl
from .errors import ContractViolation, RejectedInput
from .evaluation import evaluate_items
from .model import KoalaModel
from .numerics import ParamStore
from .training import finetune, koala_gradcheck, pretrain_base
from .vocab import PromptPair

log = logging.getLogger("koala")

COMMANDS = ("pretrain-base", "finetune", "eval", "ablate", "gradcheck", "export-attn", "make-corpus")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    if x is None:
        return ""
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


def _corpus(cfg):
    if cfg.data.dir:
        return Corpus.load(cfg.data.dir)
    return generate_synthetic_corpus(cfg, cfg.data.seed)


def _load_store(path, what):
    if not path:
        raise RejectedInput(f"no {what} checkpoint configured")
    if not (Path(path) / "manifest.json").exists():
        raise RejectedInput(f"{what} checkpoint not found: {path}")
    return ParamStore.load(path)


def _metrics_rows(rows):
    return [(step, _fmt(loss), _fmt(lr)) for step, loss, lr in rows]


def _eval_tasks(cfg, corpus):
    if cfg.eval.items:
        p = Path(cfg.eval.items)
        if not p.exists():
            raise RejectedInput(f"items file not found: {p}")
        return {p.stem: read_jsonl(p)}
    return {"test": corpus.items.get("test", []), "twins": corpus.items.get("twins", [])}


def _variant_config(cfg, variant):
    table = {
        "base": {"model.aggregation": "base"},
        "base+cs": {"model.aggregation": "koala", "model.enable_cv": False},
        "base+cs+cv": {"model.aggregation": "koala"},
        "average": {"model.aggregation": "average"},
        "concat": {"model.aggregation": "concat"},
        "memory": {"model.aggregation": "memory"},
    }
    if variant not in table:
        raise RejectedInput(f"unknown ablation variant {variant!r}; choose from {sorted(table)}")
    return cfg.with_overrides(**table[variant])


# commands

def cmd_pretrain_base(cfg, out):
    res = pretrain_base(cfg, seed=cfg.seed)
    res.store.save(out / "base")
    _write_csv(out / "metrics.csv", ["step", "loss", "lr"], _metrics_rows(res.rows))
    summary = {"steps": res.metrics["steps"], "final_loss": res.metrics["final_loss"],
               "clip_mc_accuracy": res.metrics["clip_mc_accuracy"],
               "checksum": res.store.digest()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"base checkpoint {out / 'base'}  clip MC accuracy {summary['clip_mc_accuracy']:.3f}  "
          f"({res.metrics['train_seconds']:.1f}s)")


def cmd_finetune(cfg, out):
    base = _load_store(cfg.train.base_checkpoint, "base")
    corpus = _corpus(cfg)
    res = finetune(cfg, base, corpus.train, seed=cfg.seed)
    res.store.save(out / "koala")
    _write_csv(out / "metrics.csv", ["step", "loss", "lr"], _metrics_rows(res.rows))
    print(f"koala checkpoint {out / 'koala'}  loss {res.metrics['first_loss']:.4f} -> "
          f"{res.metrics['final_loss']:.4f}  ({res.metrics['train_seconds']:.1f}s)")


def _evaluate(cfg, store, corpus, mode):
    model = KoalaModel(store, cfg)
    records = corpus.records()
    out = {}
    for task, items in _eval_tasks(cfg, corpus).items():
        if items:
            out[task] = evaluate_items(model, items, records, mode, cfg.eval.length_normalize)
    return out


def cmd_eval(cfg, out):
    store = _load_store(cfg.eval.checkpoint, "evaluation")
    results = _evaluate(cfg, store, _corpus(cfg), cfg.eval.mode)
    width = max((len(r["scores"]) for res, _ in results.values() for r in res), default=0)
    rows, summary = [], []
    for task, (res, acc) in results.items():
        for r in res:
            scores = [_fmt(s) for s in r["scores"]] + [""] * (width - len(r["scores"]))
            rows.append([r["id"], r["pred"], *scores])
        summary.append([task, _fmt(acc), len(res)])
        print(f"{task}: accuracy {'n/a' if acc is None else f'{acc:.4f}'} over {len(res)} items")
    _write_csv(out / "predictions.csv", ["id", "pred", *[f"score{i}" for i in range(width)]], rows)
    _write_csv(out / "summary.csv", ["task", "accuracy", "n"], summary)


def cmd_ablate(cfg, out):
    base = _load_store(cfg.train.base_checkpoint, "base")
    corpus = _corpus(cfg)
    rows = []
    for variant in [v.strip() for v in cfg.eval.variants.split(",") if v.strip()]:
        vcfg = _variant_config(cfg, variant)
        t0 = time.time()
        res = finetune(vcfg, base, corpus.train, seed=cfg.seed)
        results = _evaluate(vcfg, res.store, corpus, cfg.eval.mode)
        wall = time.time() - t0
        accs = {task: acc for task, (_, acc) in results.items()}
        rows.append([variant, vcfg.model.aggregation, _fmt(accs.get("test")),
                     _fmt(accs.get("twins")), len(res.rows), f"{wall:.2f}"])
        print(f"{variant}: test {accs.get('test')} twins {accs.get('twins')} "
              f"steps {len(res.rows)} {wall:.1f}s")
    _write_csv(out / "ablation.csv",
               ["variant", "aggregation", "test_accuracy", "twin_accuracy", "train_steps",
                "wall_seconds"], rows)


def cmd_gradcheck(cfg, out):
    rep = koala_gradcheck(cfg, seed=cfg.seed, max_coords=cfg.eval.gradcheck_coords or None)
    tol = cfg.eval.gradcheck_tol
    report = {"max_rel_err": rep.max_rel_err, "worst_param": rep.worst_param,
              "worst_index": rep.worst_index, "analytic": rep.analytic, "numeric": rep.numeric,
              "n_coords": rep.n_coords, "per_param": rep.per_param, "tolerance": tol,
              "passed": rep.passed(tol)}
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"max relative error {rep.max_rel_err:.3e} at {rep.worst_param}{list(rep.worst_index or ())} "
          f"(analytic {rep.analytic:.6e}, numeric {rep.numeric:.6e}) over {rep.n_coords} coordinates")
    if not rep.passed(tol):
        raise ContractViolation(f"gradient check exceeded tolerance {tol:g}")


def attention_export(model, record):
    """Head-averaged cross-attention weights of the CS and CV passes for one video."""
    cfg = model.cfg
    if cfg.model.aggregation != "koala":
        raise RejectedInput("attention export needs the koala aggregation")
    sample = make_sample(record, cfg, model.vocab, pair=PromptPair([model.vocab.placeholder], [0]))
    attn = {}
    with nx.no_grad():
        key = model.features(sample.key_actions, sample.key_seeds)
        seg = model.features(sample.seg_actions, sample.seg_seeds)
        model.encode(key, seg, attn=attn)
    m = cfg.model
    doc = {"video_id": record.video_id, "cs": [], "cv": []}
    for layer, w in enumerate(attn.get("cs") or []):
        avg = w.mean(axis=-3)   # (S, queries, frames * patches)
        for seg_i, mat in enumerate(avg):
            doc["cs"].append({"layer": layer, "segment": seg_i,
                              "axes": ["query_index", "frame_index*patches+patch_index"],
                              "frames": m.segment_frames, "patches": m.patches,
                              "shape": list(mat.shape), "weights": mat.tolist()})
    for layer, w in enumerate(attn.get("cv") or []):
        mat = w.mean(axis=-3)
        doc["cv"].append({"layer": layer, "axes": ["query_index", "segment_index*n_tokens+token_index"],
                          "segments": m.segments, "n_tokens": mat.shape[-1] // m.segments,
                          "shape": list(mat.shape), "weights": mat.tolist()})
    return doc


def cmd_export_attn(cfg, out):
    store = _load_store(cfg.eval.checkpoint, "evaluation")
    corpus = _corpus(cfg)
    records = corpus.records()
    vid = cfg.eval.sample or corpus.test[0].video_id
    if vid not in records:
        raise RejectedInput(f"unknown video id {vid!r}")
    doc = attention_export(KoalaModel(store, cfg), records[vid])
    (out / "attention.json").write_text(json.dumps(doc) + "\n")
    print(f"attention for {vid}: {len(doc['cs'])} CS and {len(doc['cv'])} CV matrices")


def cmd_make_corpus(cfg, out):
    target = Path(cfg.data.dir) if cfg.data.dir else out / "corpus"
    generate_synthetic_corpus(cfg, cfg.data.seed).save(target)
    print(f"corpus written to {target}")


HANDLERS = {
    "pretrain-base": cmd_pretrain_base, "finetune": cmd_finetune, "eval": cmd_eval,
    "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "export-attn": cmd_export_attn,
    "make-corpus": cmd_make_corpus,
}


def build_parser():
    p = argparse.ArgumentParser(prog="koala", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--mode", choices=MODES, help="visual mode for eval / ablate")
    p.add_argument("--out", default="koala_out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise RejectedInput("--seed must be an unsigned 64-bit integer")
            overrides["seed"] = args.seed
            overrides["train.seed"] = args.seed
        if args.mode:
            overrides["eval.mode"] = args.mode
        if overrides:
            cfg = cfg.with_overrides(**overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, out)
    except RejectedInput as exc:
        print(f"koala: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"koala: error: {exc}", file=sys.stderr)
        return 2
    except ContractViolation as exc:
        print(f"koala: contract violation: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
