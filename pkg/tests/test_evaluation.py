"""Protocol pieces: weighted class sampling, split planning, macro-F1,
experiment bookkeeping, feature export."""

import itertools
import json

import numpy as np
import pytest

from openintent import corpus as cp
from openintent import detector as det
from openintent import evaluation as ev
from openintent.trainer import TrainConfig

from conftest import make_embedding_file, make_keyword_corpus


class TestSampleKnownClasses:
    def test_two_equal_classes_split_evenly(self):
        counts = {"a": 100, "b": 100}
        hits = {"a": 0, "b": 0}
        for seed in range(10_000):
            chosen = ev.sample_known_classes(counts, 0.5, seed)
            assert len(chosen) == 1
            hits[chosen[0]] += 1
        assert hits["a"] / 10_000 == pytest.approx(0.5, abs=0.02)

    def test_weight_dominance(self):
        counts = {"a": 999_999, "b": 1}
        picks = [ev.sample_known_classes(counts, 0.5, seed)[0]
                 for seed in range(200)]
        assert picks.count("a") >= 199

    def test_fraction_near_one_selects_everything(self):
        counts = {"a": 5, "b": 50, "c": 500}
        for seed in range(20):
            assert ev.sample_known_classes(counts, 0.9999, seed) == \
                ("a", "b", "c")

    def test_deterministic_given_seed(self):
        counts = {"a": 10, "b": 20, "c": 30, "d": 40}
        assert ev.sample_known_classes(counts, 0.5, 7) == \
            ev.sample_known_classes(counts, 0.5, 7)

    def test_fraction_bounds(self):
        with pytest.raises(ValueError):
            ev.sample_known_classes({"a": 1, "b": 1}, 0.0, 0)
        with pytest.raises(ValueError):
            ev.sample_known_classes({"a": 1, "b": 1}, 1.0, 0)

    def test_chi_square_against_exact_pair_law(self):
        # 4 classes, 2 draws without replacement, proportional weights.
        counts = {"a": 400, "b": 300, "c": 200, "d": 100}
        names = sorted(counts)
        total = sum(counts.values())
        exact = {}
        for i, j in itertools.permutations(names, 2):
            p = (counts[i] / total) * (counts[j] / (total - counts[i]))
            key = tuple(sorted((i, j)))
            exact[key] = exact.get(key, 0.0) + p
        n_seeds = 5000
        observed = {key: 0 for key in exact}
        for seed in range(n_seeds):
            observed[ev.sample_known_classes(counts, 0.5, seed)] += 1
        chi2 = sum((observed[key] - n_seeds * p) ** 2 / (n_seeds * p)
                   for key, p in exact.items())
        assert chi2 < 25.0  # df = 5, far beyond the 0.001 critical value


@pytest.fixture(scope="module")
def corpus():
    keywords = {f"c{i}": (f"kw{i}a", f"kw{i}b") for i in range(7)}
    return make_keyword_corpus(keywords, n_train=70, n_val=14,
                               n_test=21, seed=1)


class TestPlanSplit:
    def test_quarter_fraction_floors_at_two_classes(self, corpus):
        plan = ev.plan_split(corpus, 0.25, seed=0)
        assert len(plan.known_classes) == 2

    def test_half_fraction_rounds_half_up(self, corpus):
        plan = ev.plan_split(corpus, 0.5, seed=0)
        assert len(plan.known_classes) == 4  # round(3.5) half-up

    def test_no_leakage_into_training_view(self, corpus):
        plan = ev.plan_split(corpus, 0.5, seed=3)
        known = set(plan.known_classes)
        assert all(u.label in known for u in plan.train_corpus.utterances)
        assert {u.split for u in plan.train_corpus.utterances} <= \
            {"train", "validation"}

    def test_test_split_keeps_every_utterance(self, corpus):
        plan = ev.plan_split(corpus, 0.5, seed=3)
        assert len(plan.test_ids) == 21
        known = set(plan.known_classes)
        for idx, gold in zip(plan.test_ids, plan.test_gold):
            label = corpus.utterances[idx].label
            if label in known:
                assert gold == label
            else:
                assert gold == ev.UNKNOWN_LABEL
        assert ev.UNKNOWN_LABEL in plan.test_gold

    def test_single_class_corpus_rejected(self):
        corpus = make_keyword_corpus({"only": ("hello", "hi")},
                                     n_train=4, n_val=2, n_test=2)
        with pytest.raises(ValueError):
            ev.plan_split(corpus, 0.5, seed=0)


def independent_macro_f1(predicted, gold, scope):
    """Confusion-matrix recomputation, kept separate from the library path."""
    scores = []
    for label in scope:
        tp = fp = fn = 0
        for p, g in zip(predicted, gold):
            if p == label and g == label:
                tp += 1
            elif p == label:
                fp += 1
            elif g == label:
                fn += 1
        if 2 * tp + fp + fn == 0:
            scores.append(0.0)
        else:
            scores.append(2 * tp / (2 * tp + fp + fn))
    return sum(scores) / len(scores)


class TestMacroF1:
    def test_perfect_predictions(self):
        gold = ["a", "b", ev.UNKNOWN_LABEL]
        assert ev.macro_f1(gold, gold, ["a", "b", ev.UNKNOWN_LABEL]) == 1.0
        assert ev.macro_f1(gold, gold, [ev.UNKNOWN_LABEL]) == 1.0

    def test_never_unknown_predictor_scores_zero_on_unknown(self):
        gold = ["a", ev.UNKNOWN_LABEL, ev.UNKNOWN_LABEL]
        predicted = ["a", "a", "a"]
        assert ev.macro_f1(predicted, gold, [ev.UNKNOWN_LABEL]) == 0.0

    def test_hand_computed_seven_ninths(self):
        gold = ["A", "A", "B", ev.UNKNOWN_LABEL]
        predicted = ["A", "B", "B", ev.UNKNOWN_LABEL]
        value = ev.macro_f1(predicted, gold, ["A", "B", ev.UNKNOWN_LABEL])
        assert value == pytest.approx(7.0 / 9.0, abs=1e-12)

    def test_matches_independent_recomputation(self):
        rng = np.random.default_rng(5)
        labels = ["a", "b", "c", ev.UNKNOWN_LABEL]
        for _ in range(25):
            n = int(rng.integers(5, 60))
            gold = [labels[i] for i in rng.integers(0, 4, size=n)]
            predicted = [labels[i] for i in rng.integers(0, 4, size=n)]
            mine = ev.macro_f1(predicted, gold, labels)
            theirs = independent_macro_f1(predicted, gold, labels)
            assert mine == pytest.approx(theirs, abs=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ev.macro_f1(["a"], ["a", "b"], ["a"])


@pytest.fixture(scope="module")
def mini_setup(tmp_path_factory):
    keywords = {
        "lights": ("lamp", "bright", "dim", "bulb"),
        "music": ("play", "song", "band", "tune"),
        "timer": ("minutes", "countdown", "timer", "stopwatch"),
        "weather": ("rain", "sunny", "forecast", "cloud"),
    }
    corpus = make_keyword_corpus(keywords, n_train=64, n_val=16, n_test=24,
                                 seed=9)
    tmp = tmp_path_factory.mktemp("mini")
    words = {t for u in corpus.utterances for t in u.tokens}
    path = make_embedding_file(tmp / "vectors.txt", words, dim=10, seed=13)
    table = cp.build_embeddings(corpus, path, 10)
    train_cfg = TrainConfig(batch_size=16, max_epochs=6, patience=6,
                            hidden_size=8)
    det_cfg = det.DetectionConfig(lof_k=5)
    return corpus, table, train_cfg, det_cfg


class TestRunExperiment:
    def test_bookkeeping_two_runs(self, mini_setup):
        corpus, table, train_cfg, det_cfg = mini_setup
        report = ev.run_experiment({"mini": (corpus, table)}, [0.5],
                                   ["lof-lmcl"], runs=2, train_cfg=train_cfg,
                                   det_cfg=det_cfg, base_seed=0)
        assert len(report.records) == 2
        assert [r["seed"] for r in report.records] == [0, 1]
        agg = report.aggregate()
        cell = agg[("mini", 0.5, "lof-lmcl")]
        mean = np.mean([r["f1_unknown"] for r in report.records])
        assert cell["mean_f1_unknown"] == pytest.approx(mean, abs=1e-12)
        assert cell["runs"] == 2
        assert not cell["incomplete"]
        for r in report.records:
            assert r["detector"] == det_cfg.to_dict()
            assert set(r["confusion"]) <= set(r["known_classes"]) | {
                ev.UNKNOWN_LABEL}

    def test_deterministic_reruns(self, mini_setup):
        corpus, table, train_cfg, det_cfg = mini_setup
        kwargs = dict(fractions=[0.5], methods=["msp", "lof-lmcl"], runs=1,
                      train_cfg=train_cfg, det_cfg=det_cfg, base_seed=3)
        r1 = ev.run_experiment({"mini": (corpus, table)}, **kwargs)
        r2 = ev.run_experiment({"mini": (corpus, table)}, **kwargs)
        assert r1.records == r2.records

    def test_unknown_method_rejected(self, mini_setup):
        corpus, table, train_cfg, det_cfg = mini_setup
        with pytest.raises(ValueError, match="unknown method"):
            ev.run_experiment({"mini": (corpus, table)}, [0.5], ["svm"],
                              runs=1, train_cfg=train_cfg, det_cfg=det_cfg)

    def test_cell_failure_recorded_not_raised(self, mini_setup):
        corpus, table, train_cfg, _ = mini_setup
        # k larger than the training split makes the detector unfittable
        bad_cfg = det.DetectionConfig(lof_k=10_000)
        report = ev.run_experiment({"mini": (corpus, table)}, [0.5],
                                   ["lof-lmcl", "msp"], runs=1,
                                   train_cfg=train_cfg, det_cfg=bad_cfg)
        by_method = {r["method"]: r for r in report.records}
        assert "error" in by_method["lof-lmcl"]
        assert "error" not in by_method["msp"]
        agg = report.aggregate()
        assert agg[("mini", 0.5, "lof-lmcl")]["incomplete"]

    def test_rendered_table_layout(self, mini_setup):
        corpus, table, train_cfg, det_cfg = mini_setup
        report = ev.run_experiment({"mini": (corpus, table)}, [0.5, 0.75],
                                   ["msp"], runs=1, train_cfg=train_cfg,
                                   det_cfg=det_cfg)
        text = ev.render_table(report, "mean_f1_unknown")
        lines = text.splitlines()
        assert "mini 50%" in lines[1] and "mini 75%" in lines[1]
        assert lines[1].index("mini 50%") < lines[1].index("mini 75%")
        assert lines[2].startswith("MSP")


class TestExportFeatures:
    def test_shape_and_determinism(self, mini_setup, tmp_path):
        from openintent.trainer import train
        corpus, table, train_cfg, _ = mini_setup
        params, _ = train(corpus, table, train_cfg)
        out1 = tmp_path / "a.csv"
        out2 = tmp_path / "b.csv"
        n1 = ev.export_features(params, corpus, "test", table, out1)
        ev.export_features(params, corpus, "test", table, out2)
        lines = out1.read_text().splitlines()
        assert n1 == 24
        assert len(lines) == 25
        header = lines[0].split(",")
        assert header[:2] == ["id", "label"]
        assert len(header) == 2 + params.feature_size
        assert out1.read_bytes() == out2.read_bytes()

    def test_empty_split_header_only(self, mini_setup, tmp_path):
        from openintent.trainer import train
        corpus, table, train_cfg, _ = mini_setup
        params, _ = train(corpus, table, train_cfg)
        sub = corpus.subset(corpus.classes, splits=("train", "validation"))
        out = tmp_path / "empty.csv"
        n = ev.export_features(params, sub, "test", table, out)
        assert n == 0
        assert len(out.read_text().splitlines()) == 1
