"""Command-line entry point: ``python -m retrieval_ctr <command>``.

Commands: synth, index, train, eval, retrieve, score.  Every rejection
prints ``error: ...`` on stderr and exits with status 2.  ``UBR_LOG`` sets
the log level (DEBUG, INFO, WARNING; default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config, nn
from . import selector as sel
from .archive import build_index, load_index, save_index
from .data import (
    Catalog,
    LogParseError,
    Vocabulary,
    build_vocabulary,
    clicked_items,
    parse_log,
    read_targets,
    sample_negatives,
    temporal_split,
    write_log,
    write_targets,
)
from .metrics import auc, log_loss, ne, rig
from .synthetic import ITEM_FIELDS, SynthConfig, make_dataset
from .trainer import Engine, TrainConfig, run, stream, write_report

log = logging.getLogger("retrieval_ctr")

SPLITS = ("train", "valid", "test")
LOG_FILE, CATALOG_FILE, INDEX_FILE, VOCAB_FILE = "log.csv", "catalog.csv", "index.txt", "vocab.txt"
CHECKPOINT, MODEL_CFG, REPORT, MANIFEST = "checkpoint.bin", "model.cfg", "report.csv", "manifest.json"


class Rejection(Exception):
    """A user-facing error; reported without a traceback."""


def git_hash(path: Path) -> str:
    """Content hash in git's blob format."""
    data = path.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, seed: int, inputs: Sequence[Path], timings: dict, **extra) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "seed": seed,
        "inputs": {str(p): git_hash(p) for p in inputs if p.exists()},
        "timings": {k: round(v, 6) for k, v in timings.items()},
        **extra,
    }
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(out / MANIFEST)


def _require(*paths: Path) -> None:
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise Rejection("missing input file(s): " + ", ".join(missing))


# --------------------------------------------------------------------------
# synth / index


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    cfg = config.load(SynthConfig, args.config) if args.config else SynthConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, syn = make_dataset(cfg, stream(cfg.seed, "data"), stream(cfg.seed, "negatives"))
    write_log(out / LOG_FILE, syn.records)
    syn.catalog.write(out / CATALOG_FILE, ITEM_FIELDS)
    for name in SPLITS:
        write_targets(out / f"{name}.csv", getattr(ds, name))
    with open(out / "hidden.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "hidden_train", "hidden_valid", "hidden_test", "follows_train", "follows_valid", "follows_test"])
        for u in sorted(syn.hidden, key=lambda x: int(x.rsplit("_", 1)[1])):
            w.writerow([u, *syn.hidden[u], *(int(f) for f in syn.follows[u])])
    config.dump(cfg, out / "synth.cfg")
    write_manifest(
        out, "synth", dataclasses.asdict(cfg), cfg.seed,
        [Path(args.config)] if args.config else [], {"total": time.perf_counter() - t0},
        outputs={p.name: git_hash(p) for p in sorted(out.iterdir()) if p.suffix in (".csv", ".cfg")},
    )
    print(f"wrote {len(syn.records)} behaviors for {cfg.n_users} users to {out}")
    return 0


def cmd_index(args) -> int:
    t0 = time.perf_counter()
    data = Path(args.data)
    _require(data / LOG_FILE)
    records = parse_log(data / LOG_FILE)
    catalog = Catalog.read(data / CATALOG_FILE) if (data / CATALOG_FILE).exists() else Catalog.from_records(records)
    split = temporal_split(records)
    archive = build_index(split.docs)
    if not all((data / f"{s}.csv").exists() for s in SPLITS):
        rng = stream(args.seed, "negatives")
        clicked = clicked_items(records)
        for name in SPLITS:
            write_targets(data / f"{name}.csv", sample_negatives(getattr(split, name), catalog, args.neg_ratio, rng, clicked))
    save_index(archive, data / INDEX_FILE)
    build_vocabulary(split.docs, catalog).save(data / VOCAB_FILE)
    print(f"indexed {archive.total_docs} docs, {archive.vocab_size} tokens, {len(archive.user_index)} users "
          f"({split.dropped_users} dropped)")
    log.info("index built in %.2fs", time.perf_counter() - t0)
    return 0


# --------------------------------------------------------------------------
# train / eval / retrieve / score


def _load_data(data: Path):
    _require(data / INDEX_FILE, data / VOCAB_FILE)
    return load_index(data / INDEX_FILE), Vocabulary.load(data / VOCAB_FILE)


def _targets(path: Path):
    _require(path)
    return read_targets(path)


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    data, out = Path(args.data), Path(args.out)
    cfg = config.load(TrainConfig, args.config) if args.config else TrainConfig()
    if args.mode:
        cfg = dataclasses.replace(cfg, mode=args.mode)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    archive, vocab = _load_data(data)
    parts = {s: _targets(data / f"{s}.csv") for s in SPLITS}
    t_load = time.perf_counter() - t0
    res = run(archive, vocab, parts["train"], parts["valid"], parts["test"], cfg)
    out.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(res.engine.store, out / CHECKPOINT)
    config.dump(cfg, out / MODEL_CFG)
    write_report(out / REPORT, res.rows)
    inputs = [data / INDEX_FILE, data / VOCAB_FILE, *(data / f"{s}.csv" for s in SPLITS)]
    if args.config:
        inputs.append(Path(args.config))
    write_manifest(
        out, "train", dataclasses.asdict(cfg), cfg.seed, inputs,
        {"load": t_load, **res.timings},
        data=str(data.resolve()), best_epoch=res.best_epoch, diverged=res.diverged,
        valid={"auc": res.valid_auc, "logloss": res.valid_logloss},
        test={"auc": res.test_auc, "logloss": res.test_logloss},
    )
    print(f"mode={cfg.mode} best_epoch={res.best_epoch} valid_auc={res.valid_auc:.6f} "
          f"test_auc={res.test_auc:.6f} test_logloss={res.test_logloss:.6f}")
    return 1 if res.diverged else 0


def load_engine(run_dir: Path, data: Path | None = None) -> tuple[Engine, Path]:
    _require(run_dir / CHECKPOINT, run_dir / MODEL_CFG, run_dir / MANIFEST)
    if data is None:
        data = Path(json.loads((run_dir / MANIFEST).read_text())["data"])
    cfg = config.load(TrainConfig, run_dir / MODEL_CFG)
    archive, vocab = _load_data(data)
    engine = Engine(archive, vocab, cfg)
    saved = nn.load_checkpoint(run_dir / CHECKPOINT)
    if set(saved) != set(engine.store.names()):
        raise Rejection(f"{run_dir / CHECKPOINT} does not match the model configuration")
    engine.store.restore(saved)
    return engine, data


def _metrics_line(scores: np.ndarray, labels: np.ndarray) -> str:
    return "auc,logloss,ne,rig\n" + ",".join(
        repr(float(f(scores, labels))) for f in (auc, log_loss, ne, rig)
    )


def cmd_eval(args) -> int:
    if args.scores:
        path = Path(args.scores)
        _require(path)
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or not {"score", "label"} <= set(rows[0]):
            raise Rejection(f"{path}: expected columns 'score' and 'label'")
        s = np.array([float(r["score"]) for r in rows])
        y = np.array([float(r["label"]) for r in rows])
        print(_metrics_line(s, y))
        return 0
    if not args.run:
        raise Rejection("eval needs --run (with --split) or --scores")
    engine, data = load_engine(Path(args.run), Path(args.data) if args.data else None)
    targets = _targets(Path(args.targets) if args.targets else data / f"{args.split}.csv")
    enc = engine.encode(targets, require_labels=True)
    _, _, probs = engine.evaluate(enc)
    print(_metrics_line(probs, enc.labels))
    return 0


def cmd_score(args) -> int:
    engine, data = load_engine(Path(args.run), Path(args.data) if args.data else None)
    enc = engine.encode(_targets(Path(args.targets)))
    probs = engine.predict(enc, engine.queries(enc, None, sample=False))
    for t, p in zip(enc.targets, probs):
        print(f"{t.target_id}\t{float(p)!r}")
    return 0


def retrieval_trace(engine: Engine, target) -> str:
    """Human-readable account of one prediction, sections in fixed order."""
    enc = engine.encode([target])
    idx = np.array([0])
    lines = [f"== target {target.target_id}", f"user: {target.user_token}", f"timestamp: {target.timestamp}",
             f"label: {'' if target.label is None else target.label}", ""]
    lines.append("== selection probabilities")
    masks = None
    if engine.cfg.uses_retrieval:
        p = engine.selection_probs(enc, idx)
        masks, _ = sel.force_nonempty(sel.threshold_masks(p), p)
        for tok, pi, m in zip(target.candidate_tokens, p[0], masks[0]):
            lines.append(f"{tok}\t{pi:.6f}\t{'selected' if m else '-'}")
        query = [t for t, m in zip(target.candidate_tokens, masks[0]) if m]
        q_text = f"{target.user_token} AND ({' OR '.join(query)})"
    else:
        lines.append(f"(mode {engine.cfg.mode}: no selection)")
        q_text = f"{target.user_token} most recent {engine.cfg.S}"
    lines += ["", "== query", q_text, ""]
    retr = engine.retrieve(enc, idx, masks)
    z, alpha = engine.logits(enc, idx, retr)
    lines.append("== retrieved")
    lines.append("rank\tdoc_id\ttimestamp\tbm25\talpha\ttokens")
    arch = engine.archive
    for k, (row, ok) in enumerate(zip(retr.rows[0], retr.valid[0])):
        if not ok:
            continue
        if row < 0:
            lines.append(f"{k + 1}\t-\t-\t0.0\t{float(alpha.data[0, k])!r}\t<pad>")
            continue
        toks = " ".join(arch.terms[t] for t in arch._doc_terms[row])
        lines.append(
            f"{k + 1}\t{int(arch._doc_ids[row])}\t{int(arch._doc_ts[row])}\t{float(retr.scores[0, k])!r}\t{float(alpha.data[0, k])!r}\t{toks}"
        )
    lines.append(f"alpha_sum\t{float(alpha.data[0].sum())!r}")
    lines += ["", "== prediction", f"y_hat\t{float(nn._sigmoid(z.data)[0])!r}"]
    return "\n".join(lines)


def cmd_retrieve(args) -> int:
    engine, data = load_engine(Path(args.run), Path(args.data) if args.data else None)
    targets = _targets(Path(args.targets) if args.targets else data / f"{args.split}.csv")
    match = [t for t in targets if t.target_id == args.target]
    if not match:
        raise Rejection(f"unknown target id {args.target}")
    print(retrieval_trace(engine, match[0]))
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="python -m retrieval_ctr", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="key = value file with generator settings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("index", help="build the behavior index and target splits of a data directory")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--neg-ratio", type=int, default=1)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("train", help="train selector and predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--mode", choices=("ubr", "recent_n", "sum_pooling", "ubr_sum_pooling"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "metrics of a checkpoint on a split, or of a scores file"),
                                 ("retrieve", cmd_retrieve, "trace retrieval and prediction for one target"),
                                 ("score", cmd_score, "emit target_id<TAB>probability lines")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--run", required=name != "eval")
        p.add_argument("--data", help="data directory (default: the one recorded in the run manifest)")
        p.add_argument("--targets", required=name == "score", help="targets CSV overriding --split")
        if name != "score":
            p.add_argument("--split", choices=SPLITS, default="test")
        if name == "eval":
            p.add_argument("--scores", help="CSV with score and label columns")
        if name == "retrieve":
            p.add_argument("--target", type=int, required=True)
        p.set_defaults(func=func)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("UBR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (Rejection, ValueError, KeyError, OSError, LogParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
