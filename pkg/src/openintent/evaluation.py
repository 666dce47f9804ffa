"""Experiment protocol: known-class subsampling, per-cell training and
detection, macro-F1 scoring, and multi-run aggregation.

A grid cell is (dataset, known-class fraction, method); each run redraws the
known classes with a fresh seed, trains whatever encoder the method needs,
fits its detector, and scores the full test split with held-out classes
relabeled as unknown.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import detector as det
from . import encoder as enc
from . import trainer as trn
from .corpus import Corpus, EmbeddingTable
from .losses import sigmoid, softmax

UNKNOWN_LABEL = "<unknown>"

METHODS = ("msp", "doc", "doc-softmax", "lof-softmax", "lof-lmcl")
METHOD_DISPLAY = {
    "msp": "MSP",
    "doc": "DOC",
    "doc-softmax": "DOC (Softmax)",
    "lof-softmax": "LOF (Softmax)",
    "lof-lmcl": "LOF (LMCL)",
}
_METHOD_BACKBONE = {
    "msp": "softmax",
    "doc": "sigmoid",
    "doc-softmax": "softmax",
    "lof-softmax": "softmax",
    "lof-lmcl": "lmcl",
}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_known_classes(class_counts: dict[str, int], fraction: float,
                         seed: int, min_classes: int = 1) -> tuple[str, ...]:
    """Draw known classes without replacement, weighted by training count.

    Larger classes are more likely to be drawn, smaller ones keep a chance;
    the draw order is deterministic for a fixed seed.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    names = sorted(class_counts)
    n_select = max(min_classes, _round_half_up(fraction * len(names)))
    if n_select < min_classes or n_select > len(names):
        raise ValueError(f"fraction {fraction} yields {n_select} classes out "
                         f"of {len(names)}")
    rng = np.random.default_rng(seed)
    remaining = list(names)
    weights = np.array([class_counts[c] for c in remaining], dtype=np.float64)
    chosen = []
    for _ in range(n_select):
        probs = weights / weights.sum()
        pick = int(rng.choice(len(remaining), p=probs))
        chosen.append(remaining.pop(pick))
        weights = np.delete(weights, pick)
    return tuple(sorted(chosen))


@dataclass(frozen=True)
class SplitPlan:
    dataset: str
    fraction: float
    seed: int
    known_classes: tuple[str, ...]
    train_corpus: Corpus            # train + validation, known classes only
    test_ids: tuple[int, ...]       # indices into the full corpus
    test_gold: tuple[str, ...]      # known labels, or UNKNOWN_LABEL


def plan_split(corpus: Corpus, fraction: float, seed: int,
               dataset: str = "") -> SplitPlan:
    """Choose known classes and carve the filtered training view.

    Training and validation keep only known-class utterances; the test split
    keeps everything, with held-out classes relabeled as unknown.
    """
    if len(corpus.classes) < 2:
        raise ValueError("need at least 2 classes to form a split plan")
    known = sample_known_classes(corpus.class_train_counts(), fraction, seed,
                                 min_classes=2)
    train_corpus = corpus.subset(known, splits=("train", "validation"))
    assert all(u.label in known for u in train_corpus.utterances)
    test_ids = tuple(corpus.split_indices("test"))
    known_set = set(known)
    gold = tuple(corpus.utterances[i].label
                 if corpus.utterances[i].label in known_set else UNKNOWN_LABEL
                 for i in test_ids)
    return SplitPlan(dataset, fraction, seed, known, train_corpus,
                     test_ids, gold)


def macro_f1(predicted: list[str], gold: list[str],
             scope: list[str] | tuple[str, ...]) -> float:
    """Unweighted mean of per-label F1 over the labels in scope; a label with
    no correct hits and nothing predicted scores 0."""
    if len(predicted) != len(gold):
        raise ValueError("predicted and gold lengths differ")
    scope_set = list(dict.fromkeys(scope))
    f1s = []
    for label in scope_set:
        tp = sum(1 for p, g in zip(predicted, gold) if p == g == label)
        fp = sum(1 for p, g in zip(predicted, gold) if p == label != g)
        fn = sum(1 for p, g in zip(predicted, gold) if g == label != p)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * precision * recall / (precision + recall)
                   if precision + recall else 0.0)
    return float(np.mean(f1s)) if f1s else 0.0


def confusion_counts(predicted: list[str], gold: list[str]) -> dict[str, dict[str, int]]:
    table: dict[str, dict[str, int]] = {}
    for p, g in zip(predicted, gold):
        table.setdefault(g, {}).setdefault(p, 0)
        table[g][p] += 1
    return table


def _lof_label_batch(model: det.FittedLof, classifier_scores: np.ndarray,
                     queries: np.ndarray, cfg: det.DetectionConfig,
                     known: tuple[str, ...]) -> list[str]:
    scores = det.lof_score_batch(model, queries)
    argmax = classifier_scores.argmax(axis=1)
    return [UNKNOWN_LABEL if s > cfg.lof_threshold else known[a]
            for s, a in zip(scores, argmax)]


def decide_test_split(method: str, params: enc.EncoderParams,
                      plan: SplitPlan, corpus: Corpus, table: EmbeddingTable,
                      cfg: det.DetectionConfig) -> list[str]:
    """Predicted labels for every test utterance under one method."""
    known = plan.known_classes
    test_feats = trn.extract_features(params, corpus, "test", table)
    scores = enc.class_scores(params, test_feats)

    if method == "msp":
        probs = softmax(scores)
        return [UNKNOWN_LABEL if d.is_unknown else known[d.predicted]
                for d in (det.decide_msp(row, cfg) for row in probs)]

    if method in ("doc", "doc-softmax"):
        train_feats = trn.extract_features(params, plan.train_corpus, "train",
                                           table)
        train_scores = enc.class_scores(params, train_feats)
        link = sigmoid if method == "doc" else softmax
        idx = {c: i for i, c in enumerate(plan.train_corpus.classes)}
        train_labels = np.array(
            [idx[plan.train_corpus.utterances[i].label]
             for i in plan.train_corpus.split_indices("train")])
        thresholds = det.doc_fit(link(train_scores), train_labels,
                                 cfg.doc_risk_factor)
        probs = link(scores)
        return [UNKNOWN_LABEL if d.is_unknown else known[d.predicted]
                for d in (det.decide_doc(row, thresholds) for row in probs)]

    if method in ("lof-softmax", "lof-lmcl"):
        train_feats = trn.extract_features(params, plan.train_corpus, "train",
                                           table)
        model = det.lof_fit(train_feats.rows, cfg.lof_k)
        return _lof_label_batch(model, scores, test_feats.rows, cfg, known)

    raise ValueError(f"unknown method {method!r}")


@dataclass
class ExperimentReport:
    records: list[dict] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def completed(self) -> list[dict]:
        return [r for r in self.records if "error" not in r]

    def aggregate(self) -> dict[tuple[str, float, str], dict]:
        cells: dict[tuple[str, float, str], dict] = {}
        for r in self.records:
            key = (r["dataset"], r["fraction"], r["method"])
            cell = cells.setdefault(key, {"runs": 0, "errors": 0,
                                          "f1_unknown": [], "macro_f1_all": []})
            if "error" in r:
                cell["errors"] += 1
                continue
            cell["runs"] += 1
            cell["f1_unknown"].append(r["f1_unknown"])
            cell["macro_f1_all"].append(r["macro_f1_all"])
        out = {}
        for key, cell in cells.items():
            out[key] = {
                "runs": cell["runs"],
                "incomplete": cell["errors"] > 0,
                "mean_f1_unknown": (float(np.mean(cell["f1_unknown"]))
                                    if cell["f1_unknown"] else float("nan")),
                "mean_macro_f1_all": (float(np.mean(cell["macro_f1_all"]))
                                      if cell["macro_f1_all"] else float("nan")),
            }
        return out

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def run_experiment(datasets: dict[str, tuple[Corpus, EmbeddingTable]],
                   fractions: list[float], methods: list[str], runs: int,
                   train_cfg: trn.TrainConfig, det_cfg: det.DetectionConfig,
                   base_seed: int = 0, progress=None) -> ExperimentReport:
    """Full grid: datasets x fractions x methods x runs.

    Encoders are trained once per (dataset, fraction, run, head) and shared by
    every method that uses that head.  Cell failures are recorded and skipped.
    """
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    report = ExperimentReport(settings={
        "fractions": fractions, "methods": list(methods), "runs": runs,
        "base_seed": base_seed, "detector": det_cfg.to_dict(),
        "datasets": list(datasets),
    })
    say = progress or (lambda msg: None)
    for name, (corpus, table) in datasets.items():
        for fraction in fractions:
            for run_index in range(runs):
                seed = base_seed + run_index
                plan = plan_split(corpus, fraction, seed, dataset=name)
                backbones: dict[str, enc.EncoderParams] = {}
                needed = {_METHOD_BACKBONE[m] for m in methods}
                for mode in sorted(needed):
                    say(f"[{name} {int(fraction * 100)}% run {run_index}] "
                        f"training {mode} encoder "
                        f"({len(plan.known_classes)} known classes)")
                    cfg_run = trn.TrainConfig(
                        **{**train_cfg.__dict__, "loss_mode": mode,
                           "seed": seed})
                    try:
                        backbones[mode], _ = trn.train(plan.train_corpus,
                                                       table, cfg_run)
                    except (trn.TrainingDiverged, ValueError) as err:
                        backbones[mode] = None
                        say(f"  training failed: {err}")
                for method in methods:
                    params = backbones.get(_METHOD_BACKBONE[method])
                    base = {"dataset": name, "fraction": fraction,
                            "method": method, "seed": seed,
                            "run_index": run_index,
                            "known_classes": list(plan.known_classes),
                            "detector": det_cfg.to_dict()}
                    if params is None:
                        report.records.append(
                            {**base, "error": "backbone training failed"})
                        continue
                    try:
                        predicted = decide_test_split(method, params, plan,
                                                      corpus, table, det_cfg)
                        gold = list(plan.test_gold)
                        scope_all = list(plan.known_classes) + [UNKNOWN_LABEL]
                        report.records.append({
                            **base,
                            "f1_unknown": macro_f1(predicted, gold,
                                                   [UNKNOWN_LABEL]),
                            "macro_f1_all": macro_f1(predicted, gold,
                                                     scope_all),
                            "confusion": confusion_counts(predicted, gold),
                        })
                        say(f"  {method}: f1_unknown="
                            f"{report.records[-1]['f1_unknown']:.3f} "
                            f"macro_all={report.records[-1]['macro_f1_all']:.3f}")
                    except Exception as err:  # cell-level isolation
                        report.records.append({**base, "error": str(err)})
                        say(f"  {method} failed: {err}")
    return report


def render_table(report: ExperimentReport, metric: str = "mean_f1_unknown",
                 dataset_order: list[str] | None = None) -> str:
    """Aggregate table: one row per method, dataset-by-fraction columns."""
    agg = report.aggregate()
    datasets = dataset_order or list(report.settings.get("datasets", []))
    fractions = sorted(report.settings.get("fractions", []))
    methods = [m for m in METHODS
               if m in set(report.settings.get("methods", []))]
    title = {"mean_f1_unknown": "unknown-class F1",
             "mean_macro_f1_all": "macro F1 over all classes"}[metric]
    header = ["method".ljust(16)]
    for d in datasets:
        for f in fractions:
            header.append(f"{d} {int(f * 100)}%".rjust(12))
    lines = [f"{title} (mean over runs, x100)", "".join(header)]
    for m in methods:
        row = [METHOD_DISPLAY[m].ljust(16)]
        for d in datasets:
            for f in fractions:
                cell = agg.get((d, f, m))
                if cell is None or math.isnan(cell[metric]):
                    row.append("-".rjust(12))
                else:
                    text = f"{100 * cell[metric]:.1f}"
                    if cell["incomplete"]:
                        text += "*"
                    row.append(text.rjust(12))
        lines.append("".join(row))
    return "\n".join(lines)


def export_features(params: enc.EncoderParams, corpus: Corpus, split: str,
                    table: EmbeddingTable, out_path) -> int:
    """Write one delimited row per utterance: id, gold label, feature columns.

    Returns the number of data rows written; identical inputs produce
    byte-identical files.
    """
    feats = trn.extract_features(params, corpus, split, table)
    d = params.feature_size
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["id", "label"] + [f"f{j}" for j in range(d)]) + "\n")
        for row_id, row in zip(feats.row_ids, feats.rows):
            label = corpus.utterances[row_id].label
            values = ",".join(f"{v:.17g}" for v in row)
            fh.write(f"{row_id},{label},{values}\n")
    return len(feats.row_ids)
