"""Command-line entry point.

One command with subcommands: train, detect, evaluate, export-features and
score.  Everything is driven by a flat-key JSON config document; command-line
flags override file values, and every run writes its resolved config next to
its outputs.  Exit codes: 0 success, 1 validation/input failure, 2 numeric
divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import detector as det
from . import encoder as enc
from . import evaluation as ev
from . import trainer as trn
from .corpus import (CorpusParseError, PAD_INDEX, build_embeddings,
                     load_corpus, tokenize)
from .losses import LmclConfig

DEFAULT_CONFIG = {
    "dataset.name": "snips",
    "dataset.path": None,
    "dataset.format": "snips",
    "embeddings.path": None,
    "embeddings.dim": 300,
    "corpus.max_len": None,
    "encoder.hidden_size": 64,
    "trainer.batch_size": 128,
    "trainer.max_epochs": 200,
    "trainer.patience": 10,
    "trainer.learning_rate": 1e-3,
    "trainer.clip_norm": 5.0,
    "trainer.seed": 0,
    "trainer.loss_mode": "lmcl",
    "trainer.train_embeddings": False,
    "loss.s": 30.0,
    "loss.m": 0.35,
    "detector.lof_k": 20,
    "detector.lof_threshold": 1.5,
    "detector.msp_threshold": 0.5,
    "detector.doc_risk_factor": 3.0,
    "experiment.datasets": [],
    "experiment.fractions": [0.25, 0.5, 0.75],
    "experiment.methods": list(ev.METHODS),
    "experiment.runs": 10,
    "experiment.base_seed": 0,
    "output.dir": "runs",
}

USER_ERRORS = (ValueError, FileNotFoundError, NotADirectoryError, OSError,
               CorpusParseError, enc.CheckpointError,
               trn.IncompatibleTableError, det.DegenerateDensityError)


def load_config(path: str | None) -> dict:
    config = dict(DEFAULT_CONFIG)
    if path:
        with open(path, encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ValueError(f"config {path} must be a JSON object")
        config.update(loaded)
    return config


def resolve_out_dir(config: dict, override: str | None) -> Path:
    out = os.environ.get("OPENINTENT_OUTDIR") or override or config["output.dir"]
    config["output.dir"] = str(out)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_resolved(config: dict, out_dir: Path) -> None:
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(config: dict, key: str):
    value = config.get(key)
    if value is None:
        raise ValueError(f"config key {key!r} is required")
    return value


def _load_dataset(config: dict):
    path = _require(config, "dataset.path")
    emb_path = _require(config, "embeddings.path")
    if not Path(emb_path).exists():
        raise FileNotFoundError(f"embedding file not found: {emb_path}")
    corpus = load_corpus(path, config["dataset.format"],
                         max_len=config["corpus.max_len"])
    table = build_embeddings(corpus, emb_path, int(config["embeddings.dim"]))
    return corpus, table


def _train_config(config: dict, loss_mode: str | None = None,
                  seed: int | None = None) -> trn.TrainConfig:
    return trn.TrainConfig(
        batch_size=int(config["trainer.batch_size"]),
        max_epochs=int(config["trainer.max_epochs"]),
        patience=int(config["trainer.patience"]),
        learning_rate=float(config["trainer.learning_rate"]),
        clip_norm=float(config["trainer.clip_norm"]),
        seed=int(config["trainer.seed"] if seed is None else seed),
        loss_mode=loss_mode or config["trainer.loss_mode"],
        hidden_size=int(config["encoder.hidden_size"]),
        lmcl=LmclConfig(s=float(config["loss.s"]), m=float(config["loss.m"])),
        train_embeddings=bool(config["trainer.train_embeddings"]),
    )


def _detection_config(config: dict) -> det.DetectionConfig:
    return det.DetectionConfig(
        lof_k=int(config["detector.lof_k"]),
        lof_threshold=float(config["detector.lof_threshold"]),
        msp_threshold=float(config["detector.msp_threshold"]),
        doc_risk_factor=float(config["detector.doc_risk_factor"]),
    )


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.loss:
        config["trainer.loss_mode"] = args.loss
    if args.seed is not None:
        config["trainer.seed"] = args.seed
    out_dir = resolve_out_dir(config, args.out)

    corpus, table = _load_dataset(config)
    if args.known_classes:
        known = tuple(sorted(args.known_classes.split(",")))
        bad = [c for c in known if c not in corpus.classes]
        if bad:
            raise ValueError(f"unknown class names: {', '.join(bad)}")
    elif args.fraction is not None:
        known = ev.plan_split(corpus, args.fraction,
                              int(config["trainer.seed"])).known_classes
    else:
        known = corpus.classes
    config["train.known_classes"] = list(known)
    if args.fraction is not None:
        config["train.fraction"] = args.fraction
    write_resolved(config, out_dir)

    train_corpus = corpus.subset(known, splits=("train", "validation"))
    cfg = _train_config(config)
    log_path = out_dir / "train_log.jsonl"
    params, report = trn.train(train_corpus, table, cfg, log_path=log_path)

    ckpt_path = out_dir / "checkpoint.npz"
    enc.save_checkpoint(params, ckpt_path, meta={
        "classes": list(train_corpus.classes),
        "max_len": corpus.max_len,
        "dataset": config["dataset.name"],
        "loss_s": cfg.lmcl.s,
        "loss_m": cfg.lmcl.m,
        "seed": cfg.seed,
    })
    print(f"trained {cfg.loss_mode} encoder on {len(known)} classes: "
          f"best val acc {report.best_validation_accuracy:.4f} "
          f"at epoch {report.best_epoch}/{report.epochs_run}")
    print(f"checkpoint: {ckpt_path}")
    print(f"training log: {log_path}")
    return 0


def _read_utterance_lines(path: str) -> list[str]:
    texts = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            texts.append(line.split("\t")[0])
    return texts


def _encode_texts(texts: list[str], table, max_len: int):
    batch = np.full((len(texts), max_len), PAD_INDEX, dtype=np.int64)
    lengths = np.zeros(len(texts), dtype=np.int64)
    for row, text in enumerate(texts):
        tokens = tokenize(text)[:max_len]
        if not tokens:
            raise ValueError(f"input line {row + 1} has no tokens")
        lengths[row] = len(tokens)
        batch[row, :len(tokens)] = [table.index(t) for t in tokens]
    return batch, lengths


def cmd_detect(args) -> int:
    config = load_config(args.config)
    out_dir = resolve_out_dir(config, args.out)
    params, meta = enc.load_checkpoint(args.checkpoint)
    corpus, table = _load_dataset(config)
    if params.vocab_hash != table.content_hash():
        raise trn.IncompatibleTableError(
            "checkpoint vocabulary hash does not match the configured "
            "embedding table")
    det_cfg = _detection_config(config)
    write_resolved(config, out_dir)

    classes = meta["classes"]
    max_len = int(meta["max_len"])
    texts = _read_utterance_lines(args.input)
    decisions_path = out_dir / "decisions.jsonl"

    if args.detector_file:
        model, det_cfg = det.load_lof(args.detector_file)
    else:
        train_corpus = corpus.subset(tuple(classes),
                                     splits=("train", "validation"))
        train_feats = trn.extract_features(params, train_corpus, "train",
                                           table)
        model = det.lof_fit(train_feats.rows, det_cfg.lof_k)
        det_path = out_dir / "detector.npz"
        det.save_lof(model, det_cfg, det_path)
        print(f"fitted detector on {model.reference.shape[0]} training "
              f"features: {det_path}")

    with open(decisions_path, "w", encoding="utf-8") as fh:
        if texts:
            batch, lengths = _encode_texts(texts, table, max_len)
            rows = trn.features_from_batch(params, batch, lengths, table)
            feats = enc.FeatureMatrix(rows, tuple(range(len(texts))))
            scores = enc.class_scores(params, feats)
            lof_scores = det.lof_score_batch(model, rows)
            for i, text in enumerate(texts):
                unknown = lof_scores[i] > det_cfg.lof_threshold
                record = {
                    "id": i,
                    "text": text,
                    "lof": float(lof_scores[i]),
                    "decision": ("unknown" if unknown
                                 else classes[int(scores[i].argmax())]),
                    "class_scores": {c: float(s)
                                     for c, s in zip(classes, scores[i])},
                }
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"wrote {len(texts)} decisions: {decisions_path}")
    return 0


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    if args.methods:
        config["experiment.methods"] = args.methods.split(",")
    if args.fractions:
        config["experiment.fractions"] = [float(f)
                                          for f in args.fractions.split(",")]
    if args.runs is not None:
        config["experiment.runs"] = args.runs
    out_dir = resolve_out_dir(config, args.out)

    specs = config["experiment.datasets"]
    if not specs:
        specs = [{"name": config["dataset.name"],
                  "path": _require(config, "dataset.path"),
                  "format": config["dataset.format"]}]
    if args.datasets:
        wanted = set(args.datasets.split(","))
        specs = [s for s in specs if s["name"] in wanted]
        if not specs:
            raise ValueError(f"no configured dataset matches {args.datasets!r}")
    config["experiment.datasets"] = specs
    write_resolved(config, out_dir)

    emb_path = _require(config, "embeddings.path")
    datasets = {}
    for spec in specs:
        corpus = load_corpus(spec["path"], spec["format"],
                             max_len=config["corpus.max_len"])
        table = build_embeddings(corpus, emb_path,
                                 int(config["embeddings.dim"]))
        datasets[spec["name"]] = (corpus, table)

    report = ev.run_experiment(
        datasets,
        fractions=config["experiment.fractions"],
        methods=config["experiment.methods"],
        runs=int(config["experiment.runs"]),
        train_cfg=_train_config(config),
        det_cfg=_detection_config(config),
        base_seed=int(config["experiment.base_seed"]),
        progress=print,
    )
    report.write_jsonl(out_dir / "report.jsonl")
    order = [s["name"] for s in specs]
    tables = "\n\n".join(
        ev.render_table(report, metric, dataset_order=order)
        for metric in ("mean_f1_unknown", "mean_macro_f1_all"))
    (out_dir / "table.txt").write_text(tables + "\n", encoding="utf-8")
    print()
    print(tables)
    print(f"\nreport: {out_dir / 'report.jsonl'}")
    return 0 if report.completed() else 1


def cmd_export_features(args) -> int:
    config = load_config(args.config)
    out_dir = resolve_out_dir(config, None)
    params, meta = enc.load_checkpoint(args.checkpoint)
    corpus, table = _load_dataset(config)
    write_resolved(config, out_dir)
    out_path = Path(args.out) if args.out else out_dir / f"{args.split}_features.csv"
    n = ev.export_features(params, corpus, args.split, table, out_path)
    print(f"wrote {n} feature rows: {out_path}")
    return 0


def cmd_score(args) -> int:
    model, cfg = det.load_lof(args.detector_file)
    ids, queries = [], []
    with open(args.features, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        feature_cols = [i for i, name in enumerate(header)
                        if name.startswith("f")]
        if not feature_cols:
            raise ValueError(f"{args.features}: no feature columns found")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            if len(parts) < len(header):
                continue
            ids.append(parts[0])
            queries.append([float(parts[i]) for i in feature_cols])
    out_fh = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        if queries:
            scores = det.lof_score_batch(model, np.array(queries))
            for qid, score in zip(ids, scores):
                record = {"id": qid, "lof": float(score),
                          "decision": ("unknown" if score > cfg.lof_threshold
                                       else "known")}
                out_fh.write(json.dumps(record) + "\n")
    finally:
        if args.out:
            out_fh.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="openintent",
        description="two-stage unknown-intent detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one encoder")
    p.add_argument("--config", help="flat-key JSON config file")
    p.add_argument("--loss", choices=list(enc.MODES))
    p.add_argument("--fraction", type=float,
                   help="known-class fraction, sampled with the trainer seed")
    p.add_argument("--seed", type=int)
    p.add_argument("--known-classes", help="comma-separated class names")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="score utterances against a checkpoint")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True,
                   help="utterance file: one text per line, tab-extra "
                        "columns ignored")
    p.add_argument("--detector-file", help="previously saved detector")
    p.add_argument("--out")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="run the experiment grid")
    p.add_argument("--config")
    p.add_argument("--methods", help="comma list out of " + ",".join(ev.METHODS))
    p.add_argument("--fractions", help="comma list, e.g. 0.25,0.5,0.75")
    p.add_argument("--runs", type=int)
    p.add_argument("--datasets", help="comma list of configured dataset names")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-features", help="dump encoder features")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test",
                   choices=["train", "validation", "test"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("score", help="novelty-score a feature file")
    p.add_argument("--detector-file", required=True)
    p.add_argument("--features", required=True,
                   help="delimited feature file from export-features")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except trn.TrainingDiverged as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return 2
    except USER_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
